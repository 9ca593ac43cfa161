#include "cape/pe.hpp"

#include <cmath>
#include <stdexcept>

namespace cape {

PEVariant pe_variant_from_string(const std::string& s) {
    if (s == "none") return PEVariant::None;
    if (s == "naive") return PEVariant::Naive;
    if (s == "rope") return PEVariant::Rope;
    if (s == "cope") return PEVariant::Cope;
    if (s == "cape") return PEVariant::Cape;
    throw std::invalid_argument("unknown PE variant '" + s +
                                "'; valid: none, naive, rope, cope, cape");
}

std::string to_string(PEVariant v) {
    switch (v) {
        case PEVariant::None: return "none";
        case PEVariant::Naive: return "naive";
        case PEVariant::Rope: return "rope";
        case PEVariant::Cope: return "cope";
        case PEVariant::Cape: return "cape";
    }
    return "?";
}

void PEConfig::validate() const {
    if (n_max < 1) throw std::invalid_argument("PEConfig: n_max must be >= 1");
    if (d < 1) throw std::invalid_argument("PEConfig: d must be >= 1");
    if ((variant == PEVariant::Cape || variant == PEVariant::Cope) &&
        (d_pos < 1 || d_pos > d))
        throw std::invalid_argument("PEConfig: need 1 <= d_pos <= d, got d_pos=" +
                                    std::to_string(d_pos) + " d=" + std::to_string(d));
    if (variant == PEVariant::Rope && d % 2 != 0)
        throw std::invalid_argument("PEConfig: rope needs an even rotation dimension, got d=" +
                                    std::to_string(d));
}

PositionTable PositionTable::init(long n_max, long d_pos, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_pos));
    std::vector<double> data(static_cast<std::size_t>((n_max + 1) * d_pos));
    for (long p = 1; p <= n_max; ++p)
        for (long j = 0; j < d_pos; ++j)
            data[static_cast<std::size_t>(p * d_pos + j)] = rng.uniform(-bound, bound);
    // row 0 (the floor embedding for fractional p < 1) starts at zero
    return PositionTable{Tensor::from({n_max + 1, d_pos}, std::move(data), true)};
}

GateProjection GateProjection::init(long d, long d_pos, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_pos));
    std::vector<double> w(static_cast<std::size_t>(d * d_pos));
    for (auto& x : w) x = rng.uniform(-bound, bound);
    return GateProjection{Tensor::from({d, d_pos}, std::move(w), true),
                          Tensor::zeros({d_pos}, true)};
}

PositionState compute_gates(Tape& t, const Tensor& target, const Tensor& context, long n,
                            const PEConfig& cfg) {
    if (target.shape().back() != cfg.d || context.shape().back() != cfg.d)
        throw std::invalid_argument("compute_gates: embedding dim mismatch, cfg.d=" +
                                    std::to_string(cfg.d) + " target " + shape_str(target.shape()) +
                                    " context " + shape_str(context.shape()));
    const long b = target.numel() / cfg.d;
    if (context.numel() != b * n * cfg.d)
        throw std::invalid_argument("compute_gates: context " + shape_str(context.shape()) +
                                    " does not hold " + std::to_string(b * n) + " rows");
    auto tiled = tile_rows(t, reshape(t, target, {b, cfg.d}), n);         // [B*n, d]
    auto sim = rowwise_dot(t, tiled, reshape(t, context, {b * n, cfg.d}));  // [B*n]
    if (cfg.gate_sim_scale) sim = scale(t, sim, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
    Tensor gates;
    if (cfg.variant == PEVariant::Cope) {
        gates = sigmoid(t, sim);  // similarity counts
    } else {
        // 1 - sigmoid(x) computed as sigmoid(-x): exact and never underflows
        // to zero before x ~ 700
        gates = sigmoid(t, scale(t, sim, -1.0));  // dissimilarity counts
    }
    return PositionState{reshape(t, gates, {b, n}), Tensor{}};
}

PositionState accumulate_positions(Tape& t, PositionState state,
                                   const std::vector<std::uint8_t>* mask) {
    Tensor g = state.gates;
    if (mask) {
        std::vector<double> m(mask->begin(), mask->end());
        g = mul(t, g, Tensor::from(g.shape(), std::move(m)));
    }
    state.positions = reverse_cumsum(t, g);
    return state;
}

std::vector<double> interpolate_position_embedding(double p, const PositionTable& table) {
    const long rows = table.embeddings.dim(0);
    const long d_pos = table.embeddings.dim(1);
    p = std::min(std::max(p, 0.0), static_cast<double>(rows - 1));
    const long lo = static_cast<long>(std::floor(p));
    const long hi = static_cast<long>(std::ceil(p));
    const double frac = p - static_cast<double>(lo);
    std::vector<double> out(static_cast<std::size_t>(d_pos));
    const auto& e = table.embeddings.data();
    for (long j = 0; j < d_pos; ++j)
        out[j] = (1.0 - frac) * e[lo * d_pos + j] + frac * e[hi * d_pos + j];
    return out;
}

Tensor project_target_gate(Tape& t, const Tensor& target, const GateProjection& proj) {
    if (target.shape().back() != proj.W.dim(0))
        throw std::invalid_argument("project_target_gate: target " + shape_str(target.shape()) +
                                    " vs W " + shape_str(proj.W.shape()));
    const long b = target.numel() / proj.W.dim(0);
    auto t2 = reshape(t, target, {b, proj.W.dim(0)});
    return silu(t, add_rowbias(t, matmul(t, t2, proj.W), proj.b));
}

Tensor integer_position_logits(Tape& t, const Tensor& t_prime, const PositionTable& table) {
    return matmul_nt(t, t_prime, table.embeddings);
}

Tensor interpolate_position_logits(Tape& t, const Tensor& z, const Tensor& p) {
    return interp_lastdim(t, z, p);
}

Tensor cape_logits(Tape& t, const Tensor& target, const Tensor& context, long n,
                   const GateProjection& proj, const PositionTable& table, const PEConfig& cfg,
                   const std::vector<std::uint8_t>* mask) {
    if (n > cfg.n_max)
        throw std::invalid_argument("cape_logits: context length " + std::to_string(n) +
                                    " exceeds n_max " + std::to_string(cfg.n_max));
    auto state = accumulate_positions(t, compute_gates(t, target, context, n, cfg), mask);
    Tensor positions = state.positions;
    if (cfg.variant == PEVariant::Cope)
        positions = clamp(t, positions, 0.0, cfg.effective_p_max());
    auto t_prime = project_target_gate(t, target, proj);
    auto z = integer_position_logits(t, t_prime, table);
    return interpolate_position_logits(t, z, positions);
}

Tensor naive_pe_apply(Tape& t, const Tensor& context, long n, const Tensor& table) {
    const long d = context.shape().back();
    if (table.dim(1) != d)
        throw std::invalid_argument("naive_pe_apply: table dim " + shape_str(table.shape()) +
                                    " vs context " + shape_str(context.shape()));
    if (n > table.dim(0))
        throw std::invalid_argument("naive_pe_apply: context length " + std::to_string(n) +
                                    " exceeds table rows " + std::to_string(table.dim(0)));
    const long b = context.numel() / (n * d);
    std::vector<long> ids(static_cast<std::size_t>(b * n));
    for (long e = 0; e < b; ++e)
        for (long j = 0; j < n; ++j) ids[e * n + j] = j;  // index 0 = oldest item
    return add(t, reshape(t, context, {b * n, d}), gather_rows(t, table, ids));
}

Tensor rope_apply(Tape& t, const Tensor& vectors, const std::vector<double>& positions,
                  double base) {
    const long d = vectors.shape().back();
    if (d % 2 != 0)
        throw std::invalid_argument("rope_apply: dimension must be even, got " + std::to_string(d));
    const long rows = vectors.numel() / d;
    if (static_cast<long>(positions.size()) != rows)
        throw std::invalid_argument("rope_apply: " + std::to_string(positions.size()) +
                                    " positions for " + std::to_string(rows) + " rows");
    std::vector<double> cosv(static_cast<std::size_t>(rows * d / 2));
    std::vector<double> sinv(static_cast<std::size_t>(rows * d / 2));
    for (long r = 0; r < rows; ++r)
        for (long i = 0; i < d / 2; ++i) {
            const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            cosv[r * (d / 2) + i] = std::cos(positions[r] * theta);
            sinv[r * (d / 2) + i] = std::sin(positions[r] * theta);
        }
    Tensor out = Tensor::zeros(vectors.shape(), vectors.requires_grad());
    for (long r = 0; r < rows; ++r)
        for (long i = 0; i < d / 2; ++i) {
            const double c = cosv[r * (d / 2) + i], s = sinv[r * (d / 2) + i];
            const double x0 = vectors.data()[r * d + 2 * i];
            const double x1 = vectors.data()[r * d + 2 * i + 1];
            out.data()[r * d + 2 * i] = c * x0 - s * x1;
            out.data()[r * d + 2 * i + 1] = s * x0 + c * x1;
        }
    if (out.requires_grad()) {
        out.node()->ensure_grad();
        vectors.node()->ensure_grad();
        auto vn = vectors.node(), on = out.node();
        t.record([vn, on, cosv = std::move(cosv), sinv = std::move(sinv), rows, d] {
            // rotation is orthogonal: pull gradients back through R^T
            for (long r = 0; r < rows; ++r)
                for (long i = 0; i < d / 2; ++i) {
                    const double c = cosv[r * (d / 2) + i], s = sinv[r * (d / 2) + i];
                    const double g0 = on->grad[r * d + 2 * i];
                    const double g1 = on->grad[r * d + 2 * i + 1];
                    vn->grad[r * d + 2 * i] += c * g0 + s * g1;
                    vn->grad[r * d + 2 * i + 1] += -s * g0 + c * g1;
                }
        });
    }
    return out;
}

}  // namespace cape
