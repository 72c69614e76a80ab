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

// Topological reordering: move observed tokens physically ahead of masked
// ones while every token keeps its logical position. Under a plain causal
// mask each masked slot then sees the whole observed set.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdlm/errors.hpp"
#include "cdlm/model.hpp"

namespace cdlm {

/// Tokens in logical order; masked slots hold the mask id.
struct MaskedSequence {
    std::vector<TokenId> tokens;
    std::vector<Position> positions;  // strictly increasing
    std::vector<bool> mask_flags;

    std::size_t size() const { return tokens.size(); }
    std::size_t masked_count() const;
    std::size_t observed_count() const { return size() - masked_count(); }

    /// Throws ContractError when lengths differ or positions are not increasing.
    void validate() const;
};

struct ReorderedSequence {
    std::vector<TokenId> tokens;
    std::vector<Position> positions;
    /// permutation[physical] = original index.
    std::vector<std::size_t> permutation;
    std::size_t observed_count = 0;  // observed slots occupy [0, observed_count)
};

ReorderedSequence topological_reorder(const MaskedSequence& seq);

/// Builds a MaskedSequence from clean tokens, logical positions and the
/// indices (into `tokens`) to mask.
MaskedSequence apply_mask(std::span<const TokenId> tokens, std::span<const Position> positions,
                          std::span<const std::size_t> masked_indices, TokenId mask_id);

/// Maps per-physical-index payloads back to original (logical) order.
template <typename Payload>
std::vector<Payload> restore_order(const ReorderedSequence& reordered, std::span<const Payload> values) {
    if (values.size() != reordered.permutation.size()) {
        throw ContractError("restore_order: payload length " + std::to_string(values.size()) +
                            " does not match sequence length " + std::to_string(reordered.permutation.size()));
    }
    std::vector<Payload> out(values.size());
    for (std::size_t phys = 0; phys < values.size(); ++phys) out[reordered.permutation[phys]] = values[phys];
    return out;
}

template <typename Payload>
std::vector<Payload> restore_order(const ReorderedSequence& reordered, const std::vector<Payload>& values) {
    return restore_order(reordered, std::span<const Payload>(values));
}

} // namespace cdlm
