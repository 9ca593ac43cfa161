#pragma once

#include <string>
#include <vector>

#include "cape/data.hpp"
#include "cape/pe.hpp"
#include "cape/tensor.hpp"

namespace cape {

struct ModelConfig {
    std::string backbone = "din";  // din | sasrec
    PEConfig pe;
    long n_items = 0;  // item vocab size including padding/oov rows
    long n_cats = 0;
    long feat_dim = 16;  // per-feature embedding dim; d = 2 * feat_dim
    std::vector<long> mlp_hidden = {32};   // DIN attention unit
    std::vector<long> head_hidden = {32};  // prediction head
    long n_heads = 1;
    long n_blocks = 1;
    long ff_mult = 2;
    bool din_use_diff = true;  // include t - h_j in the attention-unit input

    long d() const { return 2 * feat_dim; }
    long head_dim() const { return d() / n_heads; }
    void validate() const;
};

struct Param {
    std::string name;
    Tensor tensor;
};

struct AttentionOutput {
    Tensor weights;  // [B, n]
    Tensor pooled;   // [B, d]
};

// a_j = softmax(item_logits + pos_logits) over unpadded j; o = sum a_j h_j
AttentionOutput attention_weights_and_pool(Tape& t, const Tensor& item_logits,
                                           const Tensor& pos_logits, const Tensor& context,
                                           const std::vector<std::uint8_t>& mask);

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    void zero_grad();

    // click probabilities [B]
    Tensor forward(Tape& t, const ContextBatch& batch) const;

    // scores of candidate (item, cat) pairs per example; DIN scores each
    // candidate as the target, SASRec dots the final hidden state against
    // candidate embeddings
    std::vector<std::vector<double>> score_candidates(
        const ContextBatch& batch, const std::vector<std::vector<long>>& cand_items,
        const std::vector<std::vector<long>>& cand_cats) const;

    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    Tensor forward_din(Tape& t, const ContextBatch& batch) const;
    Tensor forward_sasrec(Tape& t, const ContextBatch& batch) const;
    Tensor sasrec_final_hidden(Tape& t, const ContextBatch& batch) const;
    Tensor embed_context(Tape& t, const ContextBatch& batch) const;
    Tensor embed_pairs(Tape& t, const std::vector<long>& items,
                       const std::vector<long>& cats) const;
    Tensor din_attention_logits(Tape& t, const Tensor& target_rows,
                                const Tensor& context_rows, long n) const;
    Tensor mlp_apply(Tape& t, const Tensor& x, const std::string& prefix) const;

    Tensor param(const std::string& name) const;
    Tensor add_param(const std::string& name, Tensor t);

    ModelConfig cfg_;
    std::vector<Param> params_;
};

struct GradCheckReport {
    std::string combo;
    long n_params = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central finite differences (h = 1e-5) over every parameter of a small
// two-example model against the tape gradients.
GradCheckReport gradcheck_combo(const std::string& backbone, PEVariant variant, double tolerance,
                                std::uint64_t seed);

}  // namespace cape
