// Copyright 2026 The cdlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Decoders over a standard prefix KV cache.
//
// All three decoders share one forward shape: tokens whose K/V are about to
// be committed ride at the front of the batch, followed by the slots still
// being resolved. Everything is plain causal in physical order, and masks are
// predicted from the logit row at their own slot. A filled token therefore
// reaches the cache in the forward after it was sampled, and that forward
// already computes its K/V against the final prefix, so nothing committed is
// ever recomputed.
//
// Accounting: n_fwd adds the number of resident slots per forward (the window
// or block as it stood before refilling), matching the usual definition of
// prefix cacheability. `instances` is the physical row count, which also
// includes the freshly appended masks.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "cdlm/model.hpp"

namespace cdlm {

enum class DistanceMode {
    kSlot,     // mask slots between i and the leftmost mask
    kLogical,  // logical-position gap to the leftmost mask
};

struct DecodeConfig {
    int window_size = 6;
    double entropy_threshold = 0.5;
    double distance_penalty = 0.10;
    double temperature = 0.0;
    int max_new_tokens = 32;
    std::uint64_t seed = 0;
    int block_size = 32;
    double entropy_temperature = 1.0;
    DistanceMode distance_mode = DistanceMode::kSlot;

    /// Throws ConfigError.
    void validate() const;
};

struct DecodeStats {
    std::size_t n_gen = 0;  // committed new tokens, including a terminating EOS
    std::size_t n_fwd = 0;
    std::size_t forwards = 0;
    std::size_t instances = 0;
    std::vector<std::size_t> committed_per_forward;  // histogram: [k] = forwards committing k tokens
    double wall_time = 0.0;                          // seconds
    double fill_entropy_sum = 0.0;                   // entropy of every slot at the moment it was filled
    std::size_t fills = 0;

    double tokens_per_forward() const {
        return forwards == 0 ? 0.0 : static_cast<double>(n_gen) / static_cast<double>(forwards);
    }
    double mean_fill_entropy() const { return fills == 0 ? 0.0 : fill_entropy_sum / static_cast<double>(fills); }
    void record_commit(std::size_t count);
};

/// n_gen / n_fwd. Throws ContractError when n_fwd is zero.
double compute_pcache(const DecodeStats& stats);

struct DecodeResult {
    std::vector<TokenId> tokens;  // new tokens in logical order, EOS excluded
    DecodeStats stats;
    bool hit_eos = false;
};

/// Anything that maps a physically ordered batch plus cache to logits and a
/// K/V delta. Implemented by the transformer and by test stubs.
class DecoderModel {
public:
    virtual ~DecoderModel() = default;
    virtual const ModelConfig& config() const = 0;
    /// Plain causal forward of `tokens` appended after `cache`.
    virtual ForwardOutput<float> run(std::span<const TokenId> tokens, std::span<const Position> positions,
                                     const KvCache<float>& cache) const = 0;
};

class TransformerModel final : public DecoderModel {
public:
    explicit TransformerModel(const Parameters<float>& params) : params_(params) {}
    const ModelConfig& config() const override { return params_.config(); }
    ForwardOutput<float> run(std::span<const TokenId> tokens, std::span<const Position> positions,
                             const KvCache<float>& cache) const override;

private:
    const Parameters<float>& params_;
};

/// Indices i with H_i + lambda * d_i < tau. Falls back to the single index of
/// least adjusted entropy (ties to smaller d, then smaller i) when none pass.
std::vector<std::size_t> select_by_entropy(std::span<const double> entropies, std::span<const double> distances,
                                           double tau, double lambda);

enum class SlotState { kFilled, kMask };

struct WindowSlot {
    SlotState state = SlotState::kMask;
    TokenId token = 0;
    Position position = 0;
};

/// One forward of a decode run.
struct ForwardRecord {
    std::size_t iteration = 0;
    std::size_t cache_len = 0;  // cache rows visible to this forward
    std::vector<TokenId> tokens;
    std::vector<Position> positions;
    std::size_t vocab = 0;
    std::vector<float> logits;        // [tokens.size(), vocab]
    std::vector<WindowSlot> window;   // slots after this forward's fills
    std::vector<Position> selected;   // positions filled by this forward
    std::size_t committed = 0;
};

struct DecodeTrace {
    std::vector<ForwardRecord> records;
    KvCache<float> final_cache;  // prompt plus every committed token
};

DecodeResult streaming_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace = nullptr, std::ostream* log = nullptr);
DecodeResult blockwise_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace = nullptr, std::ostream* log = nullptr);
DecodeResult ar_greedy_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace = nullptr, std::ostream* log = nullptr);

/// Recomputes the trace without a cache: every committed K/V row must match
/// a full pass over the committed sequence, and every recorded forward's
/// logits must match a full pass over [committed prefix; batch]. Tolerance
/// is max-abs 1e-4.
bool commit_equivalence_check(const Parameters<float>& params, const DecodeTrace& trace, double tolerance = 1e-4);

/// One JSON object per line.
void write_trace_record(std::ostream& out, const ForwardRecord& record);

} // namespace cdlm
