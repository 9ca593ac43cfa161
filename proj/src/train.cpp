#include "cape/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cape {

void TrainConfig::validate() const {
    if (lr < 0) throw std::invalid_argument("TrainConfig: negative learning rate");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
    for (long k : recall_ks)
        if (k < 1) throw std::invalid_argument("TrainConfig: recall k must be >= 1");
}

void adam_init(AdamState& state, const std::vector<Param>& params) {
    state.m.clear();
    state.v.clear();
    state.step = 0;
    for (const auto& p : params) {
        state.m.emplace_back(p.tensor.data().size(), 0.0);
        state.v.emplace_back(p.tensor.data().size(), 0.0);
    }
}

void adam_step(std::vector<Param>& params, AdamState& state, const TrainConfig& cfg) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].tensor.data();
        const auto& grad = params[pi].tensor.grad();
        if (grad.size() != data.size()) continue;  // never touched by backward
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

double auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("auc: score/label size mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks across ties
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
        i = j + 1;
    }
    double pos = 0, rank_sum = 0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k] > 0.5) {
            pos += 1;
            rank_sum += rank[k];
        }
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("auc: needs both classes, got " + std::to_string((long)pos) +
                                    " positives of " + std::to_string(n));
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double gauc(const std::vector<double>& scores, const std::vector<double>& labels,
            const std::vector<long>& user_ids) {
    if (scores.size() != labels.size() || scores.size() != user_ids.size())
        throw std::invalid_argument("gauc: input size mismatch");
    std::map<long, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < scores.size(); ++i) by_user[user_ids[i]].push_back(i);
    double weight_sum = 0.0, weighted = 0.0;
    for (const auto& [user, idxs] : by_user) {
        bool has_pos = false, has_neg = false;
        for (auto i : idxs) (labels[i] > 0.5 ? has_pos : has_neg) = true;
        if (!has_pos || !has_neg) continue;  // per-user AUC undefined
        std::vector<double> s, l;
        for (auto i : idxs) {
            s.push_back(scores[i]);
            l.push_back(labels[i]);
        }
        const double w = static_cast<double>(idxs.size());
        weighted += w * auc(s, l);
        weight_sum += w;
    }
    if (weight_sum == 0.0)
        throw std::invalid_argument("gauc: no user has both classes");
    return weighted / weight_sum;
}

long rank_of_positive(const std::vector<double>& scores, long positive_index) {
    if (positive_index < 0 || positive_index >= static_cast<long>(scores.size()))
        throw std::invalid_argument("rank_of_positive: index out of range");
    long rank = 1;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] > scores[positive_index]) ++rank;
    return rank;
}

double recall_at_k(const std::vector<double>& scores, long positive_index, long k) {
    if (k < 1 || k > static_cast<long>(scores.size()))
        throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) + " outside [1, " +
                                    std::to_string(scores.size()) + "]");
    return rank_of_positive(scores, positive_index) <= k ? 1.0 : 0.0;
}

double ndcg_at_k(const std::vector<double>& scores, long positive_index, long k) {
    if (k < 1 || k > static_cast<long>(scores.size()))
        throw std::invalid_argument("ndcg_at_k: k=" + std::to_string(k) + " outside [1, " +
                                    std::to_string(scores.size()) + "]");
    const long rank = rank_of_positive(scores, positive_index);
    return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

std::string metrics_jsonl_line(const MetricsReport& rep, const std::string& timestamp) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"epoch\":" << rep.epoch << ",\"seed\":" << rep.seed << ",\"auc\":" << rep.auc
       << ",\"gauc\":" << rep.gauc << ",\"logloss\":" << rep.logloss;
    os << ",\"recall_at_k\":{";
    bool first = true;
    for (const auto& [k, v] : rep.recall_at_k) {
        if (!first) os << ',';
        os << "\"" << k << "\":" << v;
        first = false;
    }
    os << "},\"ndcg_at_k\":{";
    first = true;
    for (const auto& [k, v] : rep.ndcg_at_k) {
        if (!first) os << ',';
        os << "\"" << k << "\":" << v;
        first = false;
    }
    os << "},\"timestamp\":\"" << timestamp << "\"}";
    return os.str();
}

MetricsReport evaluate(const Model& model, const std::vector<Interaction>& data,
                       const TrainConfig& cfg) {
    const long n_max = model.config().pe.n_max;
    auto batches = make_batches(data, cfg.batch_size, 0, n_max, /*shuffle=*/false);
    std::vector<double> scores, labels;
    std::vector<long> users;
    for (const auto& b : batches) {
        Tape t;
        auto p = model.forward(t, b);
        scores.insert(scores.end(), p.data().begin(), p.data().end());
        labels.insert(labels.end(), b.labels.begin(), b.labels.end());
        users.insert(users.end(), b.user_ids.begin(), b.user_ids.end());
    }

    MetricsReport rep;
    rep.seed = cfg.seed;
    rep.auc = auc(scores, labels);
    rep.gauc = gauc(scores, labels, users);
    double ll = 0.0;
    const double eps = 1e-7;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double p = std::min(std::max(scores[i], eps), 1.0 - eps);
        ll -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    rep.logloss = ll / static_cast<double>(scores.size());

    if (cfg.rank_metrics) {
        // categories for sampled negatives, learned from the data itself
        std::map<long, long> item_cat;
        for (const auto& it : data) {
            for (std::size_t i = 0; i < it.items.size(); ++i) item_cat[it.items[i]] = it.cats[i];
            item_cat[it.target_item] = it.target_cat;
        }
        Rng rng = Rng::substream(cfg.seed, "sampling");
        std::map<long, double> rec, ndcg;
        long lists = 0;
        for (const auto& b : batches) {
            std::vector<std::vector<long>> cand_items(b.batch), cand_cats(b.batch);
            std::vector<long> rows;
            for (long e = 0; e < b.batch; ++e) {
                if (b.labels[e] < 0.5) continue;
                std::vector<long> history(b.items.begin() + e * b.n,
                                          b.items.begin() + e * b.n + b.lengths[e]);
                history.push_back(b.target_items[e]);
                auto negs = negative_sample(history, model.config().n_items,
                                            cfg.n_eval_negatives, rng);
                cand_items[e].push_back(b.target_items[e]);
                cand_cats[e].push_back(b.target_cats[e]);
                for (long v : negs) {
                    cand_items[e].push_back(v);
                    auto it = item_cat.find(v);
                    cand_cats[e].push_back(it != item_cat.end() ? it->second : kOovId);
                }
                rows.push_back(e);
            }
            if (rows.empty()) continue;
            auto all_scores = model.score_candidates(b, cand_items, cand_cats);
            for (long e : rows) {
                ++lists;
                for (long k : cfg.recall_ks) {
                    const long kk = std::min<long>(k, static_cast<long>(all_scores[e].size()));
                    rec[k] += recall_at_k(all_scores[e], 0, kk);
                    ndcg[k] += ndcg_at_k(all_scores[e], 0, kk);
                }
            }
        }
        for (long k : cfg.recall_ks) {
            rep.recall_at_k[k] = lists ? rec[k] / lists : 0.0;
            rep.ndcg_at_k[k] = lists ? ndcg[k] / lists : 0.0;
        }
    }
    return rep;
}

TrainResult train(Model& model, const std::vector<Interaction>& train_data,
                  const std::vector<Interaction>& val_data, const TrainConfig& cfg) {
    cfg.validate();
    const long n_max = model.config().pe.n_max;
    AdamState adam;
    adam_init(adam, model.params());

    TrainResult result;
    double best_auc = -1.0;
    std::vector<std::vector<double>> best_params;
    long since_best = 0;

    for (long epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto batches = make_batches(train_data, cfg.batch_size,
                                    cfg.seed * 1000003ull + static_cast<std::uint64_t>(epoch),
                                    n_max, /*shuffle=*/true);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            Tape t;
            auto probs = model.forward(t, batches[bi]);
            auto labels = Tensor::from({batches[bi].batch}, batches[bi].labels);
            auto loss = bce_loss(t, probs, labels);
            if (!std::isfinite(loss.item()))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + " batch " + std::to_string(bi));
            model.zero_grad();
            t.backward(loss);
            adam_step(model.params(), adam, cfg);
        }

        auto rep = evaluate(model, val_data, cfg);
        rep.epoch = epoch;
        result.history.push_back(rep);

        if (rep.auc > best_auc) {
            best_auc = rep.auc;
            result.best_epoch = epoch;
            best_params.clear();
            for (const auto& p : model.params()) best_params.push_back(p.tensor.data());
            since_best = 0;
        } else {
            ++since_best;
            if (since_best >= cfg.patience) break;
        }
    }

    if (!best_params.empty())
        for (std::size_t i = 0; i < model.params().size(); ++i)
            model.params()[i].tensor.data() = best_params[i];
    result.best_auc = best_auc;
    return result;
}

}  // namespace cape
