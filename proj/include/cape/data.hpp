#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cape/rng.hpp"

namespace cape {

// Id 0 is reserved for padding in both vocabularies; id 1 is the OOV
// bucket used when evaluation data mentions ids the model never saw.
constexpr long kPaddingId = 0;
constexpr long kOovId = 1;

struct Interaction {
    long user_id = 0;
    std::vector<long> items;  // chronological, oldest first
    std::vector<long> cats;   // parallel to items
    long target_item = 0;
    long target_cat = 0;
    int label = 0;
};

struct ContextBatch {
    long batch = 0;
    long n = 0;  // padded context length
    std::vector<long> items, cats;          // batch*n, right-padded with 0
    std::vector<long> lengths;              // real length per example
    std::vector<long> target_items, target_cats;
    std::vector<double> labels;
    std::vector<std::uint8_t> mask;         // batch*n, true at real positions
    std::vector<long> user_ids;
};

struct SyntheticSpec {
    long n_users = 1000;
    long n_items = 500;         // must equal n_intents * items_per_intent
    long n_intents = 10;
    long items_per_intent = 50;
    long seg_len_min = 3, seg_len_max = 8;
    long ctx_len_min = 30, ctx_len_max = 30;
    std::uint64_t seed = 0;

    void validate() const;
};

// One positive and one negative example per user context. The context ends
// with a 1..3 item distractor run from a random intent; positive targets
// come from the intent of the segment just before that run, negatives from
// another intent that also appears in the context when possible. Neither
// target matches the distractor, so the final item alone predicts nothing.
// Item ids are 1-based; category id = intent index + 1.
std::vector<Interaction> generate_synthetic(const SyntheticSpec& spec);

long synthetic_category_of(const SyntheticSpec& spec, long item_id);

void write_csv(const std::string& path, const std::vector<Interaction>& data);
std::vector<Interaction> parse_csv_dataset(const std::string& path, long n_max = 100);

void write_spec_sidecar(const std::string& path, const SyntheticSpec& spec);
SyntheticSpec read_spec_sidecar(const std::string& path);

std::vector<ContextBatch> make_batches(const std::vector<Interaction>& data, long batch_size,
                                       std::uint64_t shuffle_seed, long n_max,
                                       bool shuffle = true);

// k uniform draws without replacement from [1, vocab) excluding history.
std::vector<long> negative_sample(const std::vector<long>& history, long vocab, long k, Rng& rng);

// user-level split into train/val/test fractions 80/10/10
struct DataSplit {
    std::vector<Interaction> train, val, test;
};
DataSplit split_by_user(const std::vector<Interaction>& data, std::uint64_t seed);

}  // namespace cape
