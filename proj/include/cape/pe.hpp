#pragma once

#include <string>
#include <vector>

#include "cape/rng.hpp"
#include "cape/tensor.hpp"

namespace cape {

enum class PEVariant { None, Naive, Rope, Cope, Cape };

PEVariant pe_variant_from_string(const std::string& s);
std::string to_string(PEVariant v);

struct PEConfig {
    PEVariant variant = PEVariant::Cape;
    long d = 32;          // item embedding dim (item ⊕ category)
    long d_pos = 8;       // position embedding dim
    long n_max = 100;     // longest context; position table has n_max+1 rows
    bool gate_sim_scale = true;  // divide the gate dot product by sqrt(d)
    double cope_p_max = -1.0;    // <0 means n_max

    double effective_p_max() const { return cope_p_max < 0 ? static_cast<double>(n_max) : cope_p_max; }
    void validate() const;
};

// Gates and fractional positions for a batch, both [B, n].
struct PositionState {
    Tensor gates;
    Tensor positions;
};

struct PositionTable {
    Tensor embeddings;  // (n_max+1) x d_pos, row p = e[p]; e[0] starts at zero

    static PositionTable init(long n_max, long d_pos, Rng& rng);
};

struct GateProjection {
    Tensor W;  // d x d_pos
    Tensor b;  // d_pos

    static GateProjection init(long d, long d_pos, Rng& rng);
};

// g_j = 1 - sigmoid(sim(t, h_j)); sim is the dot product, scaled by
// 1/sqrt(d) when configured. target [B,d], context [B*n,d] -> gates [B,n].
PositionState compute_gates(Tape& t, const Tensor& target, const Tensor& context, long n,
                            const PEConfig& cfg);

// p_j = sum_{k>=j} g_k. mask (layout [B,n]) zeroes padded gates first so
// padding never advances the count.
PositionState accumulate_positions(Tape& t, PositionState state,
                                   const std::vector<std::uint8_t>* mask = nullptr);

// Reference path (embedding interpolation). Forward-only; kept for the
// commutation check against the logit-interpolation production path.
std::vector<double> interpolate_position_embedding(double p, const PositionTable& table);

Tensor project_target_gate(Tape& t, const Tensor& target, const GateProjection& proj);

// z[p] = dot(t', e[p]) for all integer p: [B,d_pos] x table -> [B, n_max+1]
Tensor integer_position_logits(Tape& t, const Tensor& t_prime, const PositionTable& table);

Tensor interpolate_position_logits(Tape& t, const Tensor& z, const Tensor& p);

// Full position path for cape (dissimilarity gates) and cope (similarity
// gates + position clamp): target [B,d], context [B*n,d] -> logits [B,n].
Tensor cape_logits(Tape& t, const Tensor& target, const Tensor& context, long n,
                   const GateProjection& proj, const PositionTable& table, const PEConfig& cfg,
                   const std::vector<std::uint8_t>* mask = nullptr);

// h_j + e[j], index 0 = oldest item. context [B*n,d], table n_max x d.
Tensor naive_pe_apply(Tape& t, const Tensor& context, long n, const Tensor& table);

// Rotate consecutive pairs of each row by angle pos * theta_i,
// theta_i = base^(-2i/d). positions has one entry per row.
Tensor rope_apply(Tape& t, const Tensor& vectors, const std::vector<double>& positions,
                  double base = 10000.0);

}  // namespace cape
