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

#include "cdlm/trainmask.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "cdlm/errors.hpp"
#include "cdlm/reorder.hpp"
#include "cdlm/sampling.hpp"

namespace cdlm {

std::size_t BlockPlan::sequence_length() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.length;
    return n;
}

std::size_t BlockPlan::block_of(Position pos) const {
    if (pos < 1 || block_size == 0) {
        throw ContractError("position outside the block plan");
    }
    const auto k = static_cast<std::size_t>(pos - 1) / block_size;
    if (k >= blocks.size()) {
        throw ContractError("position outside the block plan");
    }
    return k;
}

BlockPlan partition_blocks(std::size_t length, std::size_t block_size) {
    if (length == 0 || block_size == 0) {
        throw ContractError("partition_blocks needs L >= 1 and B >= 1");
    }
    BlockPlan plan;
    plan.block_size = block_size;
    for (std::size_t start = 0; start < length; start += block_size) {
        plan.blocks.push_back({static_cast<Position>(start + 1), std::min(block_size, length - start)});
    }
    return plan;
}

BlockMask mask_block(const Block& block, double gamma, Rng& rng) {
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw ContractError("masking ratio must lie in (0, 1]");
    }
    const auto len = block.length;
    auto count = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(len)));
    count = std::clamp<std::size_t>(count, 1, len);

    // Partial Fisher-Yates over the block offsets.
    std::vector<std::size_t> offsets(len);
    std::iota(offsets.begin(), offsets.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.uniform_int(len - i));
        std::swap(offsets[i], offsets[j]);
    }
    BlockMask out;
    out.gamma = gamma;
    for (std::size_t i = 0; i < count; ++i) {
        out.masked_positions.push_back(block.start + static_cast<Position>(offsets[i]));
    }
    std::sort(out.masked_positions.begin(), out.masked_positions.end());
    return out;
}

std::vector<BlockMask> sample_block_masks(const BlockPlan& plan, Rng& rng) {
    std::vector<BlockMask> out;
    out.reserve(plan.count());
    for (const auto& block : plan.blocks) {
        const double gamma = rng.uniform_open_closed();
        out.push_back(mask_block(block, gamma, rng));
    }
    return out;
}

DualStreamBatch build_dual_stream_batch(std::span<const TokenId> x0, const BlockPlan& plan,
                                        std::span<const BlockMask> masks, TokenId mask_id) {
    const std::size_t len = x0.size();
    if (len == 0) {
        throw ContractError("cannot build a dual-stream batch from an empty sequence");
    }
    if (plan.sequence_length() != len) {
        throw ContractError("block plan does not cover the sequence");
    }
    if (masks.size() != plan.count()) {
        throw ContractError("need one block mask per block");
    }

    DualStreamBatch batch;
    batch.length = len;
    batch.plan = plan;
    batch.input_tokens.reserve(2 * len);
    batch.input_positions.reserve(2 * len);

    for (std::size_t i = 0; i < len; ++i) {
        const auto pos = static_cast<Position>(i + 1);
        batch.input_tokens.push_back(x0[i]);
        batch.input_positions.push_back(pos);
        batch.block_ids.push_back(plan.block_of(pos));
        batch.masked.push_back(false);
    }

    for (std::size_t k = 0; k < plan.count(); ++k) {
        const auto& block = plan.blocks[k];
        const auto& bm = masks[k];
        if (bm.masked_positions.empty()) {
            throw ContractError("every block needs at least one masked position");
        }
        std::vector<Position> positions(block.length);
        std::iota(positions.begin(), positions.end(), block.start);
        std::vector<std::size_t> masked_offsets;
        for (Position p : bm.masked_positions) {
            if (p < block.start || p >= block.start + static_cast<Position>(block.length)) {
                throw ContractError("masked position " + std::to_string(p) + " lies outside block " +
                                    std::to_string(k));
            }
            masked_offsets.push_back(static_cast<std::size_t>(p - block.start));
        }
        const auto first = static_cast<std::size_t>(block.start - 1);
        const auto seq = apply_mask(x0.subspan(first, block.length), positions, masked_offsets, mask_id);
        const auto reordered = topological_reorder(seq);
        for (std::size_t phys = 0; phys < block.length; ++phys) {
            const std::size_t global = batch.input_tokens.size();
            const std::size_t src = reordered.permutation[phys];
            batch.input_tokens.push_back(reordered.tokens[phys]);
            batch.input_positions.push_back(reordered.positions[phys]);
            batch.block_ids.push_back(k);
            const bool is_masked = seq.mask_flags[src];
            batch.masked.push_back(is_masked);
            if (is_masked) {
                batch.loss_targets.push_back({global, x0[first + src], reordered.positions[phys], k});
            }
        }
        batch.gammas.push_back(bm.gamma);
    }
    batch.visibility = build_visibility(batch, plan);
    return batch;
}

DualStreamBatch build_dual_stream_batch(std::span<const TokenId> x0, std::size_t block_size, Rng& rng,
                                        TokenId mask_id) {
    if (x0.empty()) {
        throw ContractError("cannot build a dual-stream batch from an empty sequence");
    }
    const auto plan = partition_blocks(x0.size(), block_size);
    const auto masks = sample_block_masks(plan, rng);
    return build_dual_stream_batch(x0, plan, masks, mask_id);
}

VisibilitySpec build_visibility(const DualStreamBatch& batch, const BlockPlan& plan) {
    const std::size_t len = batch.length;
    if (batch.input_tokens.size() != 2 * len || plan.sequence_length() != len) {
        throw ContractError("batch and block plan are inconsistent");
    }
    std::vector<std::vector<std::int32_t>> lists(2 * len);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < i; ++j) lists[i].push_back(static_cast<std::int32_t>(j));
    }
    std::size_t block_begin = len;
    for (const auto& block : plan.blocks) {
        // Memory index m carries logical position m + 1.
        const auto memory_visible = static_cast<std::size_t>(block.start - 1);
        for (std::size_t s = 0; s < block.length; ++s) {
            auto& list = lists[block_begin + s];
            for (std::size_t m = 0; m < memory_visible; ++m) list.push_back(static_cast<std::int32_t>(m));
            for (std::size_t j = block_begin; j < block_begin + s; ++j) list.push_back(static_cast<std::int32_t>(j));
        }
        block_begin += block.length;
    }
    return VisibilitySpec::from_lists(std::move(lists));
}

void write_mask_dump(std::ostream& out, const DualStreamBatch& batch, const std::string& header) {
    out << "# " << header << '\n';
    out << "# index stream token position block masked | visible\n";
    for (std::size_t i = 0; i < batch.input_tokens.size(); ++i) {
        out << i << ' ' << (batch.stream_of(i) == Stream::kMemory ? 'M' : 'P') << ' ' << batch.input_tokens[i] << ' '
            << batch.input_positions[i] << ' ' << batch.block_ids[i] << ' ' << (batch.masked[i] ? 1 : 0) << " |";
        for (std::int32_t j : batch.visibility.visible(i, 0)) out << ' ' << j;
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Losses

namespace {

// Adds weight * NLL(target | row) to `value` and its gradient into `grad_row`.
template <typename T>
double weighted_nll(std::span<const T> row, TokenId target, double weight, T* grad_row) {
    const auto logp = log_softmax(row);
    for (std::size_t v = 0; v < row.size(); ++v) {
        const double p = std::exp(logp[v]);
        grad_row[v] += static_cast<T>(weight * (p - (static_cast<TokenId>(v) == target ? 1.0 : 0.0)));
    }
    return -weight * logp[static_cast<std::size_t>(target)];
}

template <typename T>
std::span<const T> row_of(std::span<const T> logits, std::size_t vocab, std::size_t row) {
    return logits.subspan(row * vocab, vocab);
}

} // namespace

template <typename T>
LossResult<T> dual_stream_loss(std::span<const T> logits, std::size_t vocab, const DualStreamBatch& batch) {
    const std::size_t rows = batch.input_tokens.size();
    if (logits.size() != rows * vocab) {
        throw ContractError("dual_stream_loss: logits must cover every physical row of the batch");
    }
    std::vector<bool> has_target(rows, false);
    for (const auto& t : batch.loss_targets) has_target[t.physical_index] = true;
    for (std::size_t i = batch.length; i < rows; ++i) {
        if (batch.masked[i] && !has_target[i]) {
            throw ContractError("masked slot at physical index " + std::to_string(i) + " has no loss target");
        }
    }
    LossResult<T> out;
    out.grad.assign(logits.size(), T(0));
    for (const auto& t : batch.loss_targets) {
        const double weight = 1.0 / batch.gammas.at(t.block);
        out.value += weighted_nll(row_of(logits, vocab, t.physical_index), t.target, weight,
                                  out.grad.data() + t.physical_index * vocab);
    }
    return out;
}

template <typename T>
LossResult<T> single_stream_loss(std::span<const TokenId> x0, std::span<const std::size_t> masked_indices,
                                 std::span<const T> logits, std::size_t vocab, double gamma) {
    const std::size_t len = x0.size();
    if (masked_indices.empty()) {
        throw ContractError("single_stream_loss needs at least one masked token");
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw ContractError("masking ratio must lie in (0, 1]");
    }
    if (logits.size() != len * vocab) {
        throw ContractError("single_stream_loss: logits must have one row per token");
    }
    std::vector<std::size_t> sorted(masked_indices.begin(), masked_indices.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end() || sorted.back() >= len) {
        throw ContractError("masked indices must be unique and inside the sequence");
    }
    const std::size_t observed = len - sorted.size();
    LossResult<T> out;
    out.grad.assign(logits.size(), T(0));
    for (std::size_t j = 0; j < sorted.size(); ++j) {
        const std::size_t phys = observed + j;
        out.value += weighted_nll(row_of(logits, vocab, phys), x0[sorted[j]], 1.0 / gamma,
                                  out.grad.data() + phys * vocab);
    }
    return out;
}

template <typename T>
LossResult<T> single_stream_loss(std::span<const TokenId> x0, std::span<const std::size_t> masked_indices,
                                 std::span<const T> logits, std::size_t vocab) {
    if (x0.empty()) {
        throw ContractError("single_stream_loss needs a non-empty sequence");
    }
    const double gamma = static_cast<double>(masked_indices.size()) / static_cast<double>(x0.size());
    if (masked_indices.empty()) {
        throw ContractError("single_stream_loss needs at least one masked token");
    }
    return single_stream_loss(x0, masked_indices, logits, vocab, gamma);
}

template <typename T>
LossResult<T> ar_aux_loss(std::span<const T> logits, std::size_t vocab, std::span<const TokenId> x0) {
    const std::size_t len = x0.size();
    if (len < 2) {
        throw ContractError("ar_aux_loss needs at least two tokens");
    }
    if (logits.size() < len * vocab) {
        throw ContractError("ar_aux_loss: logits must have one row per token");
    }
    LossResult<T> out;
    out.grad.assign(len * vocab, T(0));
    const double weight = 1.0 / static_cast<double>(len - 1);
    for (std::size_t i = 0; i + 1 < len; ++i) {
        out.value += weighted_nll(row_of(logits, vocab, i), x0[i + 1], weight, out.grad.data() + i * vocab);
    }
    return out;
}

#define CDLM_INSTANTIATE_LOSSES(T)                                                                               \
    template LossResult<T> dual_stream_loss(std::span<const T>, std::size_t, const DualStreamBatch&);           \
    template LossResult<T> single_stream_loss(std::span<const TokenId>, std::span<const std::size_t>,          \
                                              std::span<const T>, std::size_t, double);                        \
    template LossResult<T> single_stream_loss(std::span<const TokenId>, std::span<const std::size_t>,          \
                                              std::span<const T>, std::size_t);                                \
    template LossResult<T> ar_aux_loss(std::span<const T>, std::size_t, std::span<const TokenId>);

CDLM_INSTANTIATE_LOSSES(float)
CDLM_INSTANTIATE_LOSSES(double)

#undef CDLM_INSTANTIATE_LOSSES

} // namespace cdlm
