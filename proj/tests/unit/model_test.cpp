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

#include <gtest/gtest.h>

#include <numeric>

#include "cdlm/checkpoint.hpp"
#include "cdlm/errors.hpp"
#include "cdlm/model.hpp"
#include "oracles.hpp"

namespace cdlm {
namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.num_heads = 4;
    c.head_dim = 4;  // model dim 16
    c.vocab_size = 12;
    c.max_logical_position = 64;
    return c;
}

ForwardBatch causal_batch(std::vector<TokenId> tokens, Position first = 1) {
    std::vector<Position> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), first);
    return {std::move(tokens), std::move(pos), VisibilitySpec::plain_causal()};
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    EXPECT_EQ(a.size(), b.size());
    float m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

TEST(ModelConfig, RejectsInvalidShapes) {
    auto c = small_config();
    c.head_dim = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(init_params(c, 7), ConfigError);
    c = small_config();
    c.vocab_size = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.num_layers = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.mask_token = 5;
    c.eos_token = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config();
    c.mask_token = 12;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(InitParams, DeterministicForFixedSeed) {
    auto c = small_config();
    EXPECT_EQ(init_params(c, 7), init_params(c, 7));
}

TEST(InitParams, DifferentSeedsGiveDifferentBytes) {
    auto c = small_config();
    EXPECT_NE(serialize_checkpoint(init_params(c, 1)), serialize_checkpoint(init_params(c, 2)));
}

TEST(InitParams, ZeroMeanAndWidthScaled) {
    ModelConfig c = small_config();
    c.num_heads = 8;
    c.head_dim = 8;  // d = 64, w_up fan-in 64 -> std 1/8
    const auto p = init_params(c, 3);
    const auto& w = p.layer(0, tensor_index::kWUp).data;
    double mean = 0, sq = 0;
    for (float v : w) {
        mean += v;
        sq += static_cast<double>(v) * v;
    }
    mean /= static_cast<double>(w.size());
    const double sd = std::sqrt(sq / static_cast<double>(w.size()) - mean * mean);
    EXPECT_NEAR(mean, 0.0, 0.01);
    EXPECT_NEAR(sd, 1.0 / 8.0, 0.01);
}

TEST(Forward, EarlierLogitsUnchangedWhenAppending) {
    const auto p = init_params(small_config(), 11);
    const auto a = forward(p, causal_batch({1, 4, 2, 7}));
    const auto b = forward(p, causal_batch({1, 4, 2, 7, 3}));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(max_abs_diff(a.row(i), b.row(i)), 0.0f) << i;
}

TEST(Forward, CausalityUnderMutationOfLaterTokens) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto c = testing::random_tiny_config(rng);
        const auto p = init_params(c, rng.next_u64());
        const std::size_t n = 2 + rng.uniform_int(10);
        auto tokens = testing::random_tokens(rng, n, c.vocab_size);
        std::vector<Position> pos(n);
        for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<Position>(1 + rng.uniform_int(60));
        const auto base = forward(p, ForwardBatch{tokens, pos, VisibilitySpec::plain_causal()});
        const std::size_t cut = rng.uniform_int(n);
        auto mutated_tokens = tokens;
        auto mutated_pos = pos;
        for (std::size_t i = cut + 1; i < n; ++i) {
            mutated_tokens[i] = static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(c.vocab_size)));
            mutated_pos[i] = static_cast<Position>(1 + rng.uniform_int(60));
        }
        const auto mutated = forward(p, ForwardBatch{mutated_tokens, mutated_pos, VisibilitySpec::plain_causal()});
        for (std::size_t i = 0; i <= cut; ++i) EXPECT_EQ(max_abs_diff(base.row(i), mutated.row(i)), 0.0f);
    }
}

TEST(Forward, CacheMatchesFullRecompute) {
    const auto p = init_params(small_config(), 2);
    const auto full = forward(p, causal_batch({3, 1, 5}));
    const auto first = forward(p, causal_batch({3, 1}));
    KvCache<float> cache(p.config());
    cache.append(first.delta);
    const auto second = forward(p, causal_batch({5}, 3), cache);
    EXPECT_LE(max_abs_diff(full.row(2), second.row(0)), 1e-4f);
}

TEST(Forward, CacheDeltaMatchesFullPassRows) {
    const auto p = init_params(small_config(), 4);
    const auto full = forward(p, causal_batch({3, 1, 5, 9}));
    const auto first = forward(p, causal_batch({3, 1}));
    KvCache<float> cache(p.config());
    cache.append(first.delta);
    const auto second = forward(p, causal_batch({5, 9}, 3), cache);
    cache.append(second.delta);
    for (int l = 0; l < p.config().num_layers; ++l) {
        EXPECT_LE(max_abs_diff(cache.keys(l), full.delta.keys(l)), 1e-4f);
        EXPECT_LE(max_abs_diff(cache.values(l), full.delta.values(l)), 1e-4f);
    }
    EXPECT_EQ(std::vector<Position>(cache.positions().begin(), cache.positions().end()),
              (std::vector<Position>{1, 2, 3, 4}));
}

TEST(Forward, RotaryShiftInvariance) {
    const auto p = init_params(small_config(), 9);
    const auto a = forward(p, causal_batch({2, 6, 1, 8}, 1));
    const auto b = forward(p, causal_batch({2, 6, 1, 8}, 41));
    EXPECT_LE(max_abs_diff(a.logits, b.logits), 1e-4f);
}

TEST(Forward, UsesLogicalNotPhysicalPositions) {
    const auto p = init_params(small_config(), 9);
    const auto a = forward(p, ForwardBatch{{2, 6, 1}, {1, 2, 3}, VisibilitySpec::plain_causal()});
    const auto b = forward(p, ForwardBatch{{2, 6, 1}, {1, 3, 2}, VisibilitySpec::plain_causal()});
    EXPECT_GT(max_abs_diff(a.row(2), b.row(2)), 1e-4f);
}

TEST(Forward, VisibilityListsRestrictAttention) {
    const auto p = init_params(small_config(), 1);
    // Row 2 sees only row 0; changing row 1 must not affect it.
    auto vis = VisibilitySpec::from_lists({{}, {0}, {0}});
    const auto a = forward(p, ForwardBatch{{1, 2, 3}, {1, 2, 3}, vis});
    const auto b = forward(p, ForwardBatch{{1, 7, 3}, {1, 5, 3}, vis});
    EXPECT_EQ(max_abs_diff(a.row(2), b.row(2)), 0.0f);
}

TEST(Forward, PositionOverflowIsRangeError) {
    const auto p = init_params(small_config(), 1);
    EXPECT_THROW(forward(p, causal_batch({1, 2}, 64)), RangeError);
}

TEST(Forward, FutureVisibilityIsContractError) {
    const auto p = init_params(small_config(), 1);
    auto vis = VisibilitySpec::from_lists({{1}, {}});
    EXPECT_THROW(forward(p, ForwardBatch{{1, 2}, {1, 2}, vis}), ContractError);
}

TEST(Forward, LengthMismatchIsContractError) {
    const auto p = init_params(small_config(), 1);
    EXPECT_THROW(forward(p, ForwardBatch{{1, 2}, {1}, VisibilitySpec::plain_causal()}), ContractError);
}

TEST(Forward, Deterministic) {
    const auto p = init_params(small_config(), 13);
    const auto a = forward(p, causal_batch({1, 2, 3, 4, 5}));
    const auto b = forward(p, causal_batch({1, 2, 3, 4, 5}));
    EXPECT_EQ(a.logits, b.logits);
}

TEST(KvCache, AppendNeverMutatesExistingRows) {
    const auto p = init_params(small_config(), 13);
    KvCache<float> cache(p.config());
    cache.append(forward(p, causal_batch({1, 2})).delta);
    const std::vector<float> before(cache.keys(0).begin(), cache.keys(0).end());
    cache.append(forward(p, causal_batch({3}, 3), cache).delta);
    EXPECT_TRUE(std::equal(before.begin(), before.end(), cache.keys(0).begin()));
    EXPECT_EQ(cache.size(), 3u);
}

} // namespace
} // namespace cdlm
