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

#include "cdlm/reorder.hpp"

#include <algorithm>

namespace cdlm {

std::size_t MaskedSequence::masked_count() const {
    return static_cast<std::size_t>(std::count(mask_flags.begin(), mask_flags.end(), true));
}

void MaskedSequence::validate() const {
    if (tokens.size() != positions.size() || tokens.size() != mask_flags.size()) {
        throw ContractError("masked sequence fields differ in length");
    }
    for (std::size_t i = 1; i < positions.size(); ++i) {
        if (positions[i] <= positions[i - 1]) {
            throw ContractError("masked sequence positions must be strictly increasing");
        }
    }
}

ReorderedSequence topological_reorder(const MaskedSequence& seq) {
    seq.validate();
    ReorderedSequence out;
    out.permutation.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (!seq.mask_flags[i]) out.permutation.push_back(i);
    }
    out.observed_count = out.permutation.size();
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.mask_flags[i]) out.permutation.push_back(i);
    }
    out.tokens.reserve(seq.size());
    out.positions.reserve(seq.size());
    for (std::size_t src : out.permutation) {
        out.tokens.push_back(seq.tokens[src]);
        out.positions.push_back(seq.positions[src]);
    }
    return out;
}

MaskedSequence apply_mask(std::span<const TokenId> tokens, std::span<const Position> positions,
                          std::span<const std::size_t> masked_indices, TokenId mask_id) {
    if (tokens.size() != positions.size()) {
        throw ContractError("apply_mask: tokens and positions differ in length");
    }
    MaskedSequence seq;
    seq.tokens.assign(tokens.begin(), tokens.end());
    seq.positions.assign(positions.begin(), positions.end());
    seq.mask_flags.assign(tokens.size(), false);
    for (std::size_t idx : masked_indices) {
        if (idx >= tokens.size()) {
            throw ContractError("apply_mask: masked index out of range");
        }
        seq.mask_flags[idx] = true;
        seq.tokens[idx] = mask_id;
    }
    return seq;
}

} // namespace cdlm
