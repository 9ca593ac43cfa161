#include "cape/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cape {

void ModelConfig::validate() const {
    if (backbone != "din" && backbone != "sasrec")
        throw std::invalid_argument("ModelConfig: unknown backbone '" + backbone +
                                    "'; valid: din, sasrec");
    if (n_items < 2 || n_cats < 2)
        throw std::invalid_argument("ModelConfig: vocab sizes must cover padding and oov ids");
    if (feat_dim < 1) throw std::invalid_argument("ModelConfig: feat_dim must be >= 1");
    if (pe.d != d())
        throw std::invalid_argument("ModelConfig: pe.d=" + std::to_string(pe.d) +
                                    " must equal 2*feat_dim=" + std::to_string(d()));
    if (backbone == "sasrec") {
        if (n_heads < 1 || d() % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d=" + std::to_string(d()) +
                                        " not divisible by n_heads=" + std::to_string(n_heads));
        if (n_blocks < 1) throw std::invalid_argument("ModelConfig: n_blocks must be >= 1");
        if (pe.variant == PEVariant::Rope && head_dim() % 2 != 0)
            throw std::invalid_argument("ModelConfig: rope needs an even head dim, got " +
                                        std::to_string(head_dim()));
    }
    pe.validate();
}

AttentionOutput attention_weights_and_pool(Tape& t, const Tensor& item_logits,
                                           const Tensor& pos_logits, const Tensor& context,
                                           const std::vector<std::uint8_t>& mask) {
    auto logits = add(t, item_logits, pos_logits);
    auto weights = softmax_lastdim(t, logits, &mask);
    auto pooled = weighted_pool(t, weights, context);
    return AttentionOutput{weights, pooled};
}

namespace {

Tensor init_linear(long rows, long cols, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
    std::vector<double> w(static_cast<std::size_t>(rows * cols));
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return Tensor::from({rows, cols}, std::move(w), true);
}

Tensor init_table(long rows, long cols, Rng& rng, double bound) {
    std::vector<double> w(static_cast<std::size_t>(rows * cols));
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return Tensor::from({rows, cols}, std::move(w), true);
}

long safe_id(long id, long vocab) {
    return (id >= 0 && id < vocab) ? id : kOovId;
}

}  // namespace

Tensor Model::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw std::logic_error("unknown parameter: " + name);
}

Tensor Model::add_param(const std::string& name, Tensor t) {
    params_.push_back({name, t});
    return t;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::substream(seed, "init");
    const long d = cfg_.d();

    const double emb_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.feat_dim));
    add_param("item_table", init_table(cfg_.n_items, cfg_.feat_dim, rng, emb_bound));
    add_param("cat_table", init_table(cfg_.n_cats, cfg_.feat_dim, rng, emb_bound));

    auto add_mlp = [&](const std::string& prefix, long in_dim, const std::vector<long>& hidden) {
        long cur = in_dim;
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            add_param(prefix + ".w" + std::to_string(i), init_linear(cur, hidden[i], rng));
            add_param(prefix + ".b" + std::to_string(i), Tensor::zeros({hidden[i]}, true));
            cur = hidden[i];
        }
        add_param(prefix + ".w_out", init_linear(cur, 1, rng));
        add_param(prefix + ".b_out", Tensor::zeros({1}, true));
    };

    if (cfg_.pe.variant == PEVariant::Naive)
        add_param("naive_pe", init_table(cfg_.pe.n_max, d, rng, 1.0 / std::sqrt((double)d)));

    if (cfg_.backbone == "din") {
        if (cfg_.pe.variant == PEVariant::Cape || cfg_.pe.variant == PEVariant::Cope) {
            auto proj = GateProjection::init(d, cfg_.pe.d_pos, rng);
            add_param("pe_proj.w", proj.W);
            add_param("pe_proj.b", proj.b);
            add_param("pe_table", PositionTable::init(cfg_.pe.n_max, cfg_.pe.d_pos, rng).embeddings);
        }
        const long att_in = d * (cfg_.din_use_diff ? 4 : 3);
        add_mlp("att_mlp", att_in, cfg_.mlp_hidden);
        add_mlp("head", 3 * d, cfg_.head_hidden);
    } else {
        const long dh = cfg_.head_dim();
        for (long blk = 0; blk < cfg_.n_blocks; ++blk) {
            const std::string bp = "blk" + std::to_string(blk) + ".";
            add_param(bp + "ln1.g", Tensor::from({d}, std::vector<double>(d, 1.0), true));
            add_param(bp + "ln1.b", Tensor::zeros({d}, true));
            for (long h = 0; h < cfg_.n_heads; ++h) {
                const std::string hp = bp + "h" + std::to_string(h) + ".";
                add_param(hp + "wq", init_linear(d, dh, rng));
                add_param(hp + "wk", init_linear(d, dh, rng));
                add_param(hp + "wv", init_linear(d, dh, rng));
            }
            add_param(bp + "wo", init_linear(d, d, rng));
            if (cfg_.pe.variant == PEVariant::Cape || cfg_.pe.variant == PEVariant::Cope) {
                auto proj = GateProjection::init(d, cfg_.pe.d_pos, rng);
                add_param(bp + "pe_proj.w", proj.W);
                add_param(bp + "pe_proj.b", proj.b);
                add_param(bp + "pe_table",
                          PositionTable::init(cfg_.pe.n_max, cfg_.pe.d_pos, rng).embeddings);
            }
            add_param(bp + "ln2.g", Tensor::from({d}, std::vector<double>(d, 1.0), true));
            add_param(bp + "ln2.b", Tensor::zeros({d}, true));
            add_param(bp + "ff.w1", init_linear(d, cfg_.ff_mult * d, rng));
            add_param(bp + "ff.b1", Tensor::zeros({cfg_.ff_mult * d}, true));
            add_param(bp + "ff.w2", init_linear(cfg_.ff_mult * d, d, rng));
            add_param(bp + "ff.b2", Tensor::zeros({d}, true));
        }
        add_param("ln_f.g", Tensor::from({d}, std::vector<double>(d, 1.0), true));
        add_param("ln_f.b", Tensor::zeros({d}, true));
    }
}

void Model::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

Tensor Model::embed_pairs(Tape& t, const std::vector<long>& items,
                          const std::vector<long>& cats) const {
    std::vector<long> iid(items.size()), cid(cats.size());
    for (std::size_t i = 0; i < items.size(); ++i) iid[i] = safe_id(items[i], cfg_.n_items);
    for (std::size_t i = 0; i < cats.size(); ++i) cid[i] = safe_id(cats[i], cfg_.n_cats);
    auto ei = gather_rows(t, param("item_table"), iid);
    auto ec = gather_rows(t, param("cat_table"), cid);
    return concat_lastdim(t, {ei, ec});
}

Tensor Model::embed_context(Tape& t, const ContextBatch& batch) const {
    auto h = embed_pairs(t, batch.items, batch.cats);  // [B*n, d]
    if (cfg_.pe.variant == PEVariant::Naive)
        h = naive_pe_apply(t, h, batch.n, param("naive_pe"));
    return h;
}

Tensor Model::mlp_apply(Tape& t, const Tensor& x, const std::string& prefix) const {
    Tensor cur = x;
    for (std::size_t i = 0;; ++i) {
        const std::string wi = prefix + ".w" + std::to_string(i);
        bool found = false;
        for (const auto& p : params_) found = found || p.name == wi;
        if (!found) break;
        cur = silu(t, add_rowbias(t, matmul(t, cur, param(wi)),
                                  param(prefix + ".b" + std::to_string(i))));
    }
    return add_rowbias(t, matmul(t, cur, param(prefix + ".w_out")), param(prefix + ".b_out"));
}

Tensor Model::din_attention_logits(Tape& t, const Tensor& target_rows, const Tensor& context_rows,
                                   long n) const {
    auto tiled = tile_rows(t, target_rows, n);  // [B*n, d]
    std::vector<Tensor> parts = {tiled, context_rows};
    if (cfg_.din_use_diff) parts.push_back(sub(t, tiled, context_rows));
    parts.push_back(mul(t, tiled, context_rows));
    auto out = mlp_apply(t, concat_lastdim(t, parts), "att_mlp");  // [B*n, 1]
    return reshape(t, out, {target_rows.dim(0), n});
}

Tensor Model::forward(Tape& t, const ContextBatch& batch) const {
    if (batch.batch < 1) throw std::invalid_argument("forward: empty batch");
    if (batch.n > cfg_.pe.n_max)
        throw std::invalid_argument("forward: context length " + std::to_string(batch.n) +
                                    " exceeds n_max " + std::to_string(cfg_.pe.n_max));
    return cfg_.backbone == "din" ? forward_din(t, batch) : forward_sasrec(t, batch);
}

Tensor Model::forward_din(Tape& t, const ContextBatch& batch) const {
    const long B = batch.batch, n = batch.n, d = cfg_.d();
    auto h = embed_context(t, batch);                                   // [B*n, d]
    auto tgt = embed_pairs(t, batch.target_items, batch.target_cats);   // [B, d]

    Tensor att_t = tgt, att_h = h;
    if (cfg_.pe.variant == PEVariant::Rope) {
        std::vector<double> ctx_pos(static_cast<std::size_t>(B * n));
        for (long e = 0; e < B; ++e)
            for (long j = 0; j < n; ++j) ctx_pos[e * n + j] = static_cast<double>(j);
        std::vector<double> tgt_pos(static_cast<std::size_t>(B));
        for (long e = 0; e < B; ++e) tgt_pos[e] = static_cast<double>(batch.lengths[e]);
        att_h = rope_apply(t, h, ctx_pos);
        att_t = rope_apply(t, tgt, tgt_pos);
    }

    auto item_logits = din_attention_logits(t, att_t, att_h, n);  // [B, n]

    Tensor pos_logits;
    if (cfg_.pe.variant == PEVariant::Cape || cfg_.pe.variant == PEVariant::Cope) {
        GateProjection proj{param("pe_proj.w"), param("pe_proj.b")};
        PositionTable table{param("pe_table")};
        pos_logits = cape_logits(t, tgt, h, n, proj, table, cfg_.pe, &batch.mask);
    } else {
        pos_logits = Tensor::zeros({B, n});
    }

    auto att = attention_weights_and_pool(t, item_logits, pos_logits, h, batch.mask);
    auto head_in = concat_lastdim(t, {att.pooled, tgt, mul(t, att.pooled, tgt)});  // [B, 3d]
    auto logit = mlp_apply(t, head_in, "head");                                    // [B, 1]
    (void)d;
    return reshape(t, sigmoid(t, logit), {B});
}

Tensor Model::sasrec_final_hidden(Tape& t, const ContextBatch& batch) const {
    const long B = batch.batch, n = batch.n, d = cfg_.d(), dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor x = embed_context(t, batch);  // [B*n, d]

    // causal mask, shared by every example
    std::vector<std::uint8_t> causal(static_cast<std::size_t>(n * n), 0);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j <= i; ++j) causal[i * n + j] = 1;
    std::vector<double> causal_f(causal.begin(), causal.end());
    auto causal_t = Tensor::from({n, n}, causal_f);

    std::vector<double> rope_pos(static_cast<std::size_t>(n));
    for (long j = 0; j < n; ++j) rope_pos[j] = static_cast<double>(j);

    const bool contextual =
        cfg_.pe.variant == PEVariant::Cape || cfg_.pe.variant == PEVariant::Cope;
    for (long blk = 0; blk < cfg_.n_blocks; ++blk) {
        const std::string bp = "blk" + std::to_string(blk) + ".";
        auto xn = layer_norm(t, x, param(bp + "ln1.g"), param(bp + "ln1.b"));

        // projections run over the whole batch at once; only the n x n
        // attention pieces need per-example slices
        Tensor z_all;  // [B*n, n_max+1]
        if (contextual) {
            GateProjection proj{param(bp + "pe_proj.w"), param(bp + "pe_proj.b")};
            auto tprime = silu(t, add_rowbias(t, matmul(t, xn, proj.W), proj.b));
            z_all = matmul_nt(t, tprime, param(bp + "pe_table"));
        }
        std::vector<Tensor> q_all(cfg_.n_heads), k_all(cfg_.n_heads), v_all(cfg_.n_heads);
        for (long h = 0; h < cfg_.n_heads; ++h) {
            const std::string hp = bp + "h" + std::to_string(h) + ".";
            q_all[h] = matmul(t, xn, param(hp + "wq"));  // [B*n, dh]
            k_all[h] = matmul(t, xn, param(hp + "wk"));
            v_all[h] = matmul(t, xn, param(hp + "wv"));
        }

        std::vector<Tensor> example_outs;
        example_outs.reserve(B);
        for (long e = 0; e < B; ++e) {
            // contextual position logits come from the block input, not the
            // per-head projections, so every head shares one position map
            // and the gates see the item/category similarity structure
            Tensor pos_logits;
            if (contextual) {
                auto xe = slice_rows(t, xn, e * n, n);  // [n, d]
                auto esims = matmul_nt(t, xe, xe);      // [n, n]
                if (cfg_.pe.gate_sim_scale)
                    esims = scale(t, esims, 1.0 / std::sqrt(static_cast<double>(d)));
                Tensor gates;
                if (cfg_.pe.variant == PEVariant::Cope)
                    gates = sigmoid(t, esims);
                else
                    gates = sigmoid(t, scale(t, esims, -1.0));
                auto p = reverse_cumsum(t, mul(t, gates, causal_t));  // p[i,j] = sum_{k=j..i}
                if (cfg_.pe.variant == PEVariant::Cope)
                    p = clamp(t, p, 0.0, cfg_.pe.effective_p_max());
                auto z = slice_rows(t, z_all, e * n, n);  // [n, n_max+1]
                pos_logits = interp_lastdim(t, z, p);
            }

            std::vector<Tensor> head_outs;
            for (long h = 0; h < cfg_.n_heads; ++h) {
                auto q = slice_rows(t, q_all[h], e * n, n);  // [n, dh]
                auto k = slice_rows(t, k_all[h], e * n, n);
                auto v = slice_rows(t, v_all[h], e * n, n);
                if (cfg_.pe.variant == PEVariant::Rope) {
                    q = rope_apply(t, q, rope_pos);
                    k = rope_apply(t, k, rope_pos);
                }
                auto sims = scale(t, matmul_nt(t, q, k), inv_sqrt_dh);  // [n, n]
                Tensor logits = pos_logits.defined() ? add(t, sims, pos_logits) : sims;
                auto a = softmax_lastdim(t, logits, &causal);
                head_outs.push_back(matmul(t, a, v));  // [n, dh]
            }
            example_outs.push_back(cfg_.n_heads == 1 ? head_outs[0]
                                                     : concat_lastdim(t, head_outs));
        }
        auto merged = B == 1 ? example_outs[0] : stack_rows(t, example_outs);  // [B*n, d]
        auto attn = matmul(t, merged, param(bp + "wo"));
        x = add(t, x, attn);
        auto x2 = layer_norm(t, x, param(bp + "ln2.g"), param(bp + "ln2.b"));
        auto hdn = silu(t, add_rowbias(t, matmul(t, x2, param(bp + "ff.w1")), param(bp + "ff.b1")));
        auto ff = add_rowbias(t, matmul(t, hdn, param(bp + "ff.w2")), param(bp + "ff.b2"));
        x = add(t, x, ff);
    }
    x = layer_norm(t, x, param("ln_f.g"), param("ln_f.b"));

    std::vector<long> last_idx(static_cast<std::size_t>(B));
    for (long e = 0; e < B; ++e) last_idx[e] = e * n + std::max<long>(batch.lengths[e], 1) - 1;
    (void)d;
    return gather_rows(t, x, last_idx);  // [B, d]
}

Tensor Model::forward_sasrec(Tape& t, const ContextBatch& batch) const {
    const long B = batch.batch;
    auto final_h = sasrec_final_hidden(t, batch);
    auto tgt = embed_pairs(t, batch.target_items, batch.target_cats);  // [B, d]
    auto score = scale(t, rowwise_dot(t, final_h, tgt), 1.0 / std::sqrt((double)cfg_.d()));
    return reshape(t, sigmoid(t, score), {B});
}

std::vector<std::vector<double>> Model::score_candidates(
    const ContextBatch& batch, const std::vector<std::vector<long>>& cand_items,
    const std::vector<std::vector<long>>& cand_cats) const {
    std::vector<std::vector<double>> out(batch.batch);
    if (cfg_.backbone == "sasrec") {
        Tape t;
        auto final_h = sasrec_final_hidden(t, batch);  // [B, d]
        for (long e = 0; e < batch.batch; ++e) {
            Tape t2;
            auto emb = embed_pairs(t2, cand_items[e], cand_cats[e]);  // [C, d]
            const long C = static_cast<long>(cand_items[e].size());
            out[e].resize(C);
            for (long c = 0; c < C; ++c) {
                double s = 0.0;
                for (long j = 0; j < cfg_.d(); ++j)
                    s += final_h.data()[e * cfg_.d() + j] * emb.data()[c * cfg_.d() + j];
                out[e][c] = s;
            }
        }
        return out;
    }
    // DIN: score every candidate as the target of a repeated example
    for (long e = 0; e < batch.batch; ++e) {
        const long C = static_cast<long>(cand_items[e].size());
        if (C == 0) continue;
        ContextBatch rb;
        rb.batch = C;
        rb.n = batch.n;
        for (long c = 0; c < C; ++c) {
            rb.items.insert(rb.items.end(), batch.items.begin() + e * batch.n,
                            batch.items.begin() + (e + 1) * batch.n);
            rb.cats.insert(rb.cats.end(), batch.cats.begin() + e * batch.n,
                           batch.cats.begin() + (e + 1) * batch.n);
            rb.mask.insert(rb.mask.end(), batch.mask.begin() + e * batch.n,
                           batch.mask.begin() + (e + 1) * batch.n);
            rb.lengths.push_back(batch.lengths[e]);
            rb.target_items.push_back(cand_items[e][c]);
            rb.target_cats.push_back(cand_cats[e][c]);
            rb.labels.push_back(0.0);
            rb.user_ids.push_back(batch.user_ids[e]);
        }
        Tape t;
        auto p = forward(t, rb);
        out[e] = p.data();
    }
    return out;
}

// --- checkpoint ------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'C', 'A', 'P', 'E', 'C', 'K', 'P', '1'};

void write_u32(std::ofstream& f, std::uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ofstream& f, std::uint64_t v) { f.write(reinterpret_cast<char*>(&v), 8); }
std::uint32_t read_u32(std::ifstream& f) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::ifstream& f) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
}  // namespace

void Model::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(kMagic, 8);
    write_u32(f, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
        write_u32(f, static_cast<std::uint32_t>(p.name.size()));
        f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_u32(f, static_cast<std::uint32_t>(p.tensor.shape().size()));
        for (long dim : p.tensor.shape()) write_u64(f, static_cast<std::uint64_t>(dim));
        f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.data().size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("write failed: " + path);
}

void Model::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    const std::uint32_t count = read_u32(f);
    if (count != params_.size())
        throw std::runtime_error("checkpoint has " + std::to_string(count) + " parameters, model has " +
                                 std::to_string(params_.size()));
    for (auto& p : params_) {
        const std::uint32_t nlen = read_u32(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        if (name != p.name)
            throw std::runtime_error("checkpoint parameter '" + name + "' where '" + p.name +
                                     "' was expected");
        const std::uint32_t ndim = read_u32(f);
        Shape shape(ndim);
        for (auto& dim : shape) dim = static_cast<long>(read_u64(f));
        if (shape != p.tensor.shape())
            throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file " +
                                     shape_str(shape) + " vs model " + shape_str(p.tensor.shape()));
        f.read(reinterpret_cast<char*>(p.tensor.data().data()),
               static_cast<std::streamsize>(p.tensor.data().size() * sizeof(double)));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    }
}

// --- gradient checking -----------------------------------------------------

GradCheckReport gradcheck_combo(const std::string& backbone, PEVariant variant, double tolerance,
                                std::uint64_t seed) {
    ModelConfig cfg;
    cfg.backbone = backbone;
    cfg.feat_dim = 4;
    cfg.n_items = 12;
    cfg.n_cats = 5;
    cfg.mlp_hidden = {6};
    cfg.head_hidden = {6};
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.pe.variant = variant;
    cfg.pe.d = cfg.d();
    cfg.pe.d_pos = 3;
    cfg.pe.n_max = 6;

    Model model(cfg, seed);

    ContextBatch batch;
    batch.batch = 2;
    batch.n = 4;
    batch.items = {2, 3, 4, 5, 6, 7, 8, 0};
    batch.cats = {2, 3, 2, 3, 4, 2, 3, 0};
    batch.mask = {1, 1, 1, 1, 1, 1, 1, 0};
    batch.lengths = {4, 3};
    batch.target_items = {5, 9};
    batch.target_cats = {3, 4};
    batch.labels = {1.0, 0.0};
    batch.user_ids = {1, 2};

    auto labels = Tensor::from({2}, batch.labels);
    auto loss_value = [&] {
        Tape t;
        return bce_loss(t, model.forward(t, batch), labels).item();
    };

    model.zero_grad();
    {
        Tape t;
        t.backward(bce_loss(t, model.forward(t, batch), labels));
    }

    GradCheckReport rep;
    rep.combo = backbone + "+" + to_string(variant);
    const double h = 1e-5;
    for (auto& p : model.params()) {
        auto& data = p.tensor.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = loss_value();
            data[i] = saved - h;
            const double down = loss_value();
            data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double analytic = p.tensor.grad()[i];
            const double err =
                std::abs(analytic - fd) / std::max(std::abs(analytic) + std::abs(fd), 1e-2);
            rep.max_rel_err = std::max(rep.max_rel_err, err);
            ++rep.n_params;
        }
    }
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

}  // namespace cape
