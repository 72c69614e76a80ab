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

// Dual-stream training batches.
//
// Physical layout for a clean sequence x0 of length L:
//
//   [0, L)    memory stream      x0 verbatim, positions 1..L, plain causal
//   [L, 2L)   prediction stream  blocks of B, each masked and reordered so
//                                observed tokens precede masks
//
// A prediction token in block k sees the memory tokens whose logical
// position precedes the block, plus the physically earlier tokens of its own
// block. It never sees another prediction block.

#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cdlm/model.hpp"
#include "cdlm/rng.hpp"

namespace cdlm {

struct Block {
    Position start = 1;  // first logical position (1-based)
    std::size_t length = 0;
};

struct BlockPlan {
    std::size_t block_size = 0;
    std::vector<Block> blocks;

    std::size_t count() const { return blocks.size(); }
    std::size_t sequence_length() const;
    /// Block holding logical position `pos`.
    std::size_t block_of(Position pos) const;
};

/// ceil(L / B) blocks tiling positions 1..L; all of size B except maybe the last.
BlockPlan partition_blocks(std::size_t length, std::size_t block_size);

struct BlockMask {
    double gamma = 1.0;
    std::vector<Position> masked_positions;  // ascending
};

/// Masks max(1, round(gamma * len)) positions of one block, drawn uniformly
/// without replacement.
BlockMask mask_block(const Block& block, double gamma, Rng& rng);

/// gamma_k ~ U(0, 1] independently per block, then mask_block().
std::vector<BlockMask> sample_block_masks(const BlockPlan& plan, Rng& rng);

struct LossTarget {
    std::size_t physical_index = 0;
    TokenId target = 0;
    Position position = 0;
    std::size_t block = 0;
};

enum class Stream { kMemory, kPrediction };

struct DualStreamBatch {
    std::size_t length = 0;  // L
    BlockPlan plan;
    std::vector<TokenId> input_tokens;      // 2L
    std::vector<Position> input_positions;  // [1..L, 1..L]
    std::vector<std::size_t> block_ids;     // per physical index
    std::vector<bool> masked;               // per physical index
    std::vector<LossTarget> loss_targets;   // one per masked prediction slot
    std::vector<double> gammas;             // per block
    VisibilitySpec visibility;

    Stream stream_of(std::size_t physical) const { return physical < length ? Stream::kMemory : Stream::kPrediction; }
    ForwardBatch forward_batch() const { return {input_tokens, input_positions, visibility}; }
};

DualStreamBatch build_dual_stream_batch(std::span<const TokenId> x0, const BlockPlan& plan,
                                        std::span<const BlockMask> masks, TokenId mask_id);
DualStreamBatch build_dual_stream_batch(std::span<const TokenId> x0, std::size_t block_size, Rng& rng,
                                        TokenId mask_id);

VisibilitySpec build_visibility(const DualStreamBatch& batch, const BlockPlan& plan);

/// Plain-text dump of a batch: one row per physical index with the visible
/// key list, used for golden-file checks of the attention pattern.
void write_mask_dump(std::ostream& out, const DualStreamBatch& batch, const std::string& header);

// ---------------------------------------------------------------------------
// Losses. Each returns the scalar value plus d(value)/d(logits) shaped like
// the logits it was given ([rows, vocab], row-major).

template <typename T>
struct LossResult {
    double value = 0.0;
    std::vector<T> grad;
};

/// sum_k (1 / gamma_k) * sum_{masked j in block k} NLL(target_j), reading the
/// logit row at each mask slot. `logits` covers all 2L physical rows.
template <typename T>
LossResult<T> dual_stream_loss(std::span<const T> logits, std::size_t vocab, const DualStreamBatch& batch);

/// (1 / gamma) * sum_j NLL(x0[m_j]) where the j-th mask (ascending logical
/// order) is read at physical row N_o + j of the reordered sequence.
/// `masked_indices` index into x0. gamma defaults to N_m / L.
template <typename T>
LossResult<T> single_stream_loss(std::span<const TokenId> x0, std::span<const std::size_t> masked_indices,
                                 std::span<const T> logits, std::size_t vocab, double gamma);
template <typename T>
LossResult<T> single_stream_loss(std::span<const TokenId> x0, std::span<const std::size_t> masked_indices,
                                 std::span<const T> logits, std::size_t vocab);

/// Mean next-token NLL over positions 2..L of a plain causal pass over x0.
template <typename T>
LossResult<T> ar_aux_loss(std::span<const T> logits, std::size_t vocab, std::span<const TokenId> x0);

inline double combined_loss(double dual, double ar_aux, double alpha) { return (1.0 - alpha) * dual + alpha * ar_aux; }

} // namespace cdlm
