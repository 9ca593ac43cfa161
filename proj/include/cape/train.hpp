#pragma once

#include <map>
#include <string>
#include <vector>

#include "cape/data.hpp"
#include "cape/model.hpp"

namespace cape {

struct TrainConfig {
    double lr = 5e-4;
    long batch_size = 256;
    long max_epochs = 10;
    long patience = 3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;
    long n_eval_negatives = 10;
    std::vector<long> recall_ks = {1, 5, 10};
    bool rank_metrics = true;  // recall/ndcg need candidate scoring; optional for speed

    void validate() const;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long step = 0;
};

void adam_init(AdamState& state, const std::vector<Param>& params);
void adam_step(std::vector<Param>& params, AdamState& state, const TrainConfig& cfg);

struct MetricsReport {
    double auc = 0.0, gauc = 0.0, logloss = 0.0;
    std::map<long, double> recall_at_k, ndcg_at_k;
    long epoch = 0;
    std::uint64_t seed = 0;
};

std::string metrics_jsonl_line(const MetricsReport& rep, const std::string& timestamp);

// Rank-based AUC with ties counted 0.5, O(n log n). Throws when only one
// class is present.
double auc(const std::vector<double>& scores, const std::vector<double>& labels);

// Per-user AUC weighted by impression count; single-class users are
// dropped. Throws when no user has both classes.
double gauc(const std::vector<double>& scores, const std::vector<double>& labels,
            const std::vector<long>& user_ids);

// Rank of the positive among candidate scores (1-based; ties resolved in
// the positive's favor).
long rank_of_positive(const std::vector<double>& scores, long positive_index);
double recall_at_k(const std::vector<double>& scores, long positive_index, long k);
double ndcg_at_k(const std::vector<double>& scores, long positive_index, long k);

MetricsReport evaluate(const Model& model, const std::vector<Interaction>& data,
                       const TrainConfig& cfg);

struct TrainResult {
    std::vector<MetricsReport> history;
    long best_epoch = 0;
    double best_auc = 0.0;
};

// Epoch loop with AUC-based model selection and early stopping; leaves the
// best parameters in the model.
TrainResult train(Model& model, const std::vector<Interaction>& train_data,
                  const std::vector<Interaction>& val_data, const TrainConfig& cfg);

}  // namespace cape
