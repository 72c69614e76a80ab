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

#include <cmath>
#include <numeric>
#include <set>

#include "cdlm/errors.hpp"
#include "cdlm/reorder.hpp"
#include "cdlm/trainmask.hpp"
#include "oracles.hpp"

namespace cdlm {
namespace {

constexpr TokenId kMask = 31;

std::vector<TokenId> seq(std::size_t n) {
    std::vector<TokenId> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<TokenId>(10 + i % 20);
    return x;
}

std::vector<std::size_t> lengths(const BlockPlan& p) {
    std::vector<std::size_t> out;
    for (const auto& b : p.blocks) out.push_back(b.length);
    return out;
}

TEST(PartitionBlocks, CeilingArithmetic) {
    auto p = partition_blocks(100, 32);
    EXPECT_EQ(p.count(), 4u);
    EXPECT_EQ(lengths(p), (std::vector<std::size_t>{32, 32, 32, 4}));
    EXPECT_EQ(p.blocks[3].start, 97);
    EXPECT_EQ(lengths(partition_blocks(32, 32)), (std::vector<std::size_t>{32}));
    EXPECT_EQ(lengths(partition_blocks(5, 8)), (std::vector<std::size_t>{5}));
    EXPECT_EQ(partition_blocks(9, 4).block_of(9), 2u);
}

TEST(MaskBlock, FullRatioMasksEverything) {
    Rng rng(1);
    const auto m = mask_block({5, 4}, 1.0, rng);
    EXPECT_EQ(m.masked_positions, (std::vector<Position>{5, 6, 7, 8}));
}

TEST(MaskBlock, HalfRatioMasksHalfWithinBounds) {
    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
        const auto m = mask_block({33, 32}, 0.5, rng);
        ASSERT_EQ(m.masked_positions.size(), 16u);
        EXPECT_EQ(std::set<Position>(m.masked_positions.begin(), m.masked_positions.end()).size(), 16u);
        for (Position p : m.masked_positions) {
            EXPECT_GE(p, 33);
            EXPECT_LE(p, 64);
        }
    }
}

TEST(MaskBlock, AtLeastOneMask) {
    Rng rng(3);
    EXPECT_EQ(mask_block({1, 8}, 0.01, rng).masked_positions.size(), 1u);
    EXPECT_THROW(mask_block({1, 8}, 0.0, rng), ContractError);
}

TEST(SampleBlockMasks, DeterministicUnderSeed) {
    const auto plan = partition_blocks(50, 8);
    Rng a(9), b(9);
    const auto ma = sample_block_masks(plan, a);
    const auto mb = sample_block_masks(plan, b);
    ASSERT_EQ(ma.size(), mb.size());
    for (std::size_t k = 0; k < ma.size(); ++k) {
        EXPECT_EQ(ma[k].gamma, mb[k].gamma);
        EXPECT_EQ(ma[k].masked_positions, mb[k].masked_positions);
        EXPECT_GT(ma[k].gamma, 0.0);
        EXPECT_LE(ma[k].gamma, 1.0);
    }
}

TEST(DualStreamBatch, WorkedExample) {
    const std::vector<TokenId> x0{1, 2, 3, 4};
    const auto plan = partition_blocks(4, 2);
    const std::vector<BlockMask> masks{{0.5, {2}}, {0.5, {4}}};
    const auto b = build_dual_stream_batch(x0, plan, masks, kMask);
    EXPECT_EQ(b.input_positions, (std::vector<Position>{1, 2, 3, 4, 1, 2, 3, 4}));
    EXPECT_EQ(b.input_tokens, (std::vector<TokenId>{1, 2, 3, 4, 1, kMask, 3, kMask}));
    ASSERT_EQ(b.loss_targets.size(), 2u);
    EXPECT_EQ(b.loss_targets[0].physical_index, 5u);
    EXPECT_EQ(b.loss_targets[0].target, 2);
    EXPECT_EQ(b.loss_targets[1].physical_index, 7u);
    EXPECT_EQ(b.loss_targets[1].target, 4);
    EXPECT_EQ(b.loss_targets[1].block, 1u);
}

TEST(DualStreamBatch, FullMaskKeepsPositionsInOrder) {
    const auto x0 = seq(7);
    const auto plan = partition_blocks(7, 3);
    std::vector<BlockMask> masks;
    for (const auto& blk : plan.blocks) {
        BlockMask m{1.0, {}};
        for (std::size_t i = 0; i < blk.length; ++i) m.masked_positions.push_back(blk.start + static_cast<Position>(i));
        masks.push_back(m);
    }
    const auto b = build_dual_stream_batch(x0, plan, masks, kMask);
    for (std::size_t i = 7; i < 14; ++i) {
        EXPECT_EQ(b.input_tokens[i], kMask);
        EXPECT_EQ(b.input_positions[i], static_cast<Position>(i - 6));
    }
}

TEST(DualStreamBatch, SingleBlockEqualsSingleStreamReorder) {
    const auto x0 = seq(6);
    const auto plan = partition_blocks(6, 10);
    const std::vector<BlockMask> masks{{0.5, {2, 3, 6}}};
    const auto b = build_dual_stream_batch(x0, plan, masks, kMask);
    std::vector<Position> pos(6);
    std::iota(pos.begin(), pos.end(), 1);
    const auto r = topological_reorder(apply_mask(x0, pos, std::vector<std::size_t>{1, 2, 5}, kMask));
    EXPECT_EQ(std::vector<TokenId>(b.input_tokens.begin() + 6, b.input_tokens.end()), r.tokens);
    EXPECT_EQ(std::vector<Position>(b.input_positions.begin() + 6, b.input_positions.end()), r.positions);
}

TEST(DualStreamBatch, EmptySequenceIsContractError) {
    Rng rng(0);
    EXPECT_THROW(build_dual_stream_batch(std::vector<TokenId>{}, 4, rng, kMask), ContractError);
}

TEST(DualStreamBatch, MaskOutsideBlockIsContractError) {
    const auto x0 = seq(4);
    const std::vector<BlockMask> masks{{0.5, {3}}, {0.5, {4}}};
    EXPECT_THROW(build_dual_stream_batch(x0, partition_blocks(4, 2), masks, kMask), ContractError);
}

TEST(DualStreamBatch, InvariantsOnRandomBatches) {
    Rng rng(44);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t len = 1 + rng.uniform_int(40);
        const std::size_t bs = 1 + rng.uniform_int(12);
        const auto x0 = testing::random_tokens(rng, len, 32);
        const auto b = build_dual_stream_batch(x0, bs, rng, kMask);
        // Memory stream is x0 verbatim at positions 1..L, both streams share positions.
        for (std::size_t i = 0; i < len; ++i) {
            EXPECT_EQ(b.input_tokens[i], x0[i]);
            EXPECT_EQ(b.input_positions[i], static_cast<Position>(i + 1));
            EXPECT_FALSE(b.masked[i]);
        }
        std::multiset<Position> pred(b.input_positions.begin() + static_cast<std::ptrdiff_t>(len),
                                     b.input_positions.end());
        for (Position p = 1; p <= static_cast<Position>(len); ++p) EXPECT_EQ(pred.count(p), 1u);
        // Observed before masked inside every block; one target per mask.
        std::size_t masked = 0;
        for (std::size_t i = len + 1; i < 2 * len; ++i) {
            if (b.block_ids[i] == b.block_ids[i - 1] && b.masked[i - 1]) { EXPECT_TRUE(b.masked[i]); }
            masked += b.masked[i] ? 1 : 0;
        }
        masked += b.masked[len] ? 1 : 0;
        EXPECT_EQ(b.loss_targets.size(), masked);
        for (const auto& t : b.loss_targets) {
            EXPECT_EQ(t.target, x0[static_cast<std::size_t>(t.position - 1)]);
            EXPECT_EQ(b.input_tokens[t.physical_index], kMask);
        }
    }
}

TEST(BuildVisibility, BoundaryAndWorkedCase) {
    const std::vector<TokenId> x0{1, 2, 3, 4};
    const std::vector<BlockMask> masks{{0.5, {2}}, {0.5, {4}}};
    const auto b = build_dual_stream_batch(x0, partition_blocks(4, 2), masks, kMask);
    EXPECT_TRUE(b.visibility.visible(4, 0).empty());
    // Block 2 mask slot (physical 7): memory logical {1,2} plus the earlier slot of its block.
    EXPECT_EQ(b.visibility.visible(7, 0), (std::vector<std::int32_t>{0, 1, 6}));
    EXPECT_EQ(b.visibility.visible(3, 0), (std::vector<std::int32_t>{0, 1, 2}));
}

TEST(BuildVisibility, MatchesOracleAndIsolatesBlocks) {
    Rng rng(8);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t len = 1 + rng.uniform_int(48);
        const std::size_t bs = 1 + rng.uniform_int(16);
        const auto x0 = testing::random_tokens(rng, len, 32);
        const auto b = build_dual_stream_batch(x0, bs, rng, kMask);
        const auto oracle = testing::dual_stream_visibility_oracle(b);
        for (std::size_t q = 0; q < 2 * len; ++q) {
            const auto got = b.visibility.visible(q, 0);
            ASSERT_EQ(std::set<int>(got.begin(), got.end()), oracle[q]) << "query " << q;
            for (std::int32_t k : got) {
                EXPECT_LT(static_cast<std::size_t>(k), q);
                if (q >= len && static_cast<std::size_t>(k) >= len) { EXPECT_EQ(b.block_ids[q], b.block_ids[k]); }
                if (q >= len && static_cast<std::size_t>(k) < len) {
                    EXPECT_LT(b.input_positions[k], b.plan.blocks[b.block_ids[q]].start);
                }
            }
        }
    }
}

TEST(MaskDump, OneRowPerPhysicalIndex) {
    const std::vector<TokenId> x0{1, 2, 3, 4};
    const std::vector<BlockMask> masks{{0.5, {2}}, {0.5, {4}}};
    const auto b = build_dual_stream_batch(x0, partition_blocks(4, 2), masks, kMask);
    std::ostringstream os;
    write_mask_dump(os, b, "example");
    EXPECT_EQ(os.str(), testing::mask_dump_oracle(b, "example"));
    EXPECT_NE(os.str().find("7 P 31 4 1 1 | 0 1 6\n"), std::string::npos) << os.str();
}

// ---------------------------------------------------------------------------
// Losses

double nll(const std::vector<double>& row, TokenId target) {
    double m = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (double v : row) z += std::exp(v - m);
    return -(row[static_cast<std::size_t>(target)] - m - std::log(z));
}

TEST(DualStreamLoss, InverseRatioWeighting) {
    const std::vector<TokenId> x0{0, 1, 2, 3};
    const std::vector<BlockMask> masks{{0.5, {1, 3}}};
    const auto b = build_dual_stream_batch(x0, partition_blocks(4, 4), masks, 5);
    const std::size_t v = 6;
    std::vector<double> logits(8 * v);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::sin(static_cast<double>(i));
    auto row = [&](std::size_t r) { return std::vector<double>(logits.begin() + r * v, logits.begin() + (r + 1) * v); };
    // Physical layout of the prediction stream: [x@2, x@4, M@1, M@3].
    const double a = nll(row(6), 0), c = nll(row(7), 2);
    EXPECT_NEAR(dual_stream_loss<double>(logits, v, b).value, 2.0 * (a + c), 1e-12);
}

TEST(DualStreamLoss, FullRatioIsPlainSum) {
    const std::vector<TokenId> x0{0, 1, 2, 3};
    const std::vector<BlockMask> masks{{1.0, {1, 2}}, {1.0, {3, 4}}};
    const auto b = build_dual_stream_batch(x0, partition_blocks(4, 2), masks, 5);
    const std::size_t v = 6;
    std::vector<double> logits(8 * v);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = std::cos(0.7 * static_cast<double>(i));
    double expect = 0;
    for (std::size_t r = 4; r < 8; ++r) {
        expect += nll(std::vector<double>(logits.begin() + r * v, logits.begin() + (r + 1) * v), x0[r - 4]);
    }
    EXPECT_NEAR(dual_stream_loss<double>(logits, v, b).value, expect, 1e-12);
}

TEST(DualStreamLoss, MissingTargetIsContractError) {
    const std::vector<TokenId> x0{0, 1, 2, 3};
    const std::vector<BlockMask> masks{{0.5, {2}}, {0.5, {4}}};
    auto b = build_dual_stream_batch(x0, partition_blocks(4, 2), masks, 5);
    b.loss_targets.pop_back();
    std::vector<float> logits(8 * 6, 0.0f);
    EXPECT_THROW(dual_stream_loss<float>(logits, 6, b), ContractError);
}

TEST(SingleStreamLoss, SingleMaskWeightedByLength) {
    const std::vector<TokenId> x0{0, 1, 2, 3, 4};
    const std::vector<std::size_t> m{2};
    const std::size_t v = 6;
    std::vector<double> logits(5 * v);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = 0.1 * static_cast<double>(i % 7);
    // The only mask sits at physical index N_o = 4.
    const double expect = 5.0 * nll(std::vector<double>(logits.begin() + 4 * v, logits.end()), 2);
    EXPECT_NEAR(single_stream_loss<double>(x0, m, logits, v).value, expect, 1e-12);
}

TEST(SingleStreamLoss, ZeroMasksIsContractError) {
    const std::vector<TokenId> x0{0, 1};
    std::vector<float> logits(2 * 4, 0.0f);
    EXPECT_THROW(single_stream_loss<float>(x0, {}, logits, 4), ContractError);
}

TEST(ArAuxLoss, PerfectAndUniformModels) {
    const std::vector<TokenId> x0{1, 3, 0, 2};
    const std::size_t v = 5;
    std::vector<double> perfect(4 * v, 0.0);
    for (std::size_t i = 0; i + 1 < 4; ++i) perfect[i * v + static_cast<std::size_t>(x0[i + 1])] = 1e4;
    EXPECT_NEAR(ar_aux_loss<double>(perfect, v, x0).value, 0.0, 1e-12);
    std::vector<double> uniform(4 * v, 0.3);
    EXPECT_NEAR(ar_aux_loss<double>(uniform, v, x0).value, std::log(5.0), 1e-12);
    EXPECT_THROW(ar_aux_loss<double>(std::vector<double>(v), v, std::vector<TokenId>{1}), ContractError);
}

TEST(CombinedLoss, Arithmetic) {
    EXPECT_DOUBLE_EQ(combined_loss(2.0, 4.0, 0.0), 2.0);
    EXPECT_DOUBLE_EQ(combined_loss(2.0, 4.0, 1.0), 4.0);
    EXPECT_DOUBLE_EQ(combined_loss(2.0, 4.0, 0.5), 3.0);
}

ModelConfig grad_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.num_heads = 2;
    c.head_dim = 4;
    c.vocab_size = 8;
    c.max_logical_position = 16;
    return c;
}

Parameters<double> analytic_grad(const Parameters<double>& p, const ForwardBatch& batch,
                                 const std::vector<double>& dlogits) {
    Activations<double> acts;
    forward_train(p, batch, acts);
    Parameters<double> g(p.config());
    backward(p, acts, std::span<const double>(dlogits), g);
    return g;
}

TEST(LossGradients, DualStreamMatchesFiniteDifferences) {
    const auto p = init_params(grad_config(), 5).cast<double>();
    Rng rng(6);
    const auto x0 = testing::random_tokens(rng, 6, 8);
    const auto b = build_dual_stream_batch(x0, 3, rng, p.config().mask_id());
    const auto fb = b.forward_batch();
    const auto loss = [&](const Parameters<double>& q) { return dual_stream_loss<double>(forward(q, fb).logits, 8, b).value; };
    const auto g = analytic_grad(p, fb, dual_stream_loss<double>(forward(p, fb).logits, 8, b).grad);
    const auto check = testing::finite_difference_check(p, g, loss);
    EXPECT_LE(check.max_rel_error, 1e-3);
}

TEST(LossGradients, ArAuxMatchesFiniteDifferences) {
    const auto p = init_params(grad_config(), 7).cast<double>();
    Rng rng(8);
    const auto x0 = testing::random_tokens(rng, 6, 8);
    std::vector<Position> pos(6);
    std::iota(pos.begin(), pos.end(), 1);
    const ForwardBatch fb{x0, pos, VisibilitySpec::plain_causal()};
    const auto loss = [&](const Parameters<double>& q) { return ar_aux_loss<double>(forward(q, fb).logits, 8, x0).value; };
    const auto g = analytic_grad(p, fb, ar_aux_loss<double>(forward(p, fb).logits, 8, x0).grad);
    EXPECT_LE(testing::finite_difference_check(p, g, loss).max_rel_error, 1e-3);
}

TEST(LossReduction, SingleBlockDualEqualsSingleStream) {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = init_params(grad_config(), rng.next_u64()).cast<double>();
        const std::size_t len = 2 + rng.uniform_int(9);
        const auto x0 = testing::random_tokens(rng, len, 8);
        const auto plan = partition_blocks(len, len + rng.uniform_int(4));
        const auto masks = sample_block_masks(plan, rng);
        const auto b = build_dual_stream_batch(x0, plan, masks, p.config().mask_id());
        const double dual = dual_stream_loss<double>(forward(p, b.forward_batch()).logits, 8, b).value;

        std::vector<std::size_t> idx;
        for (Position q : masks[0].masked_positions) idx.push_back(static_cast<std::size_t>(q - 1));
        std::vector<Position> pos(len);
        std::iota(pos.begin(), pos.end(), 1);
        const auto r = topological_reorder(apply_mask(x0, pos, idx, p.config().mask_id()));
        const auto out = forward(p, ForwardBatch{r.tokens, r.positions, VisibilitySpec::plain_causal()});
        const double single = single_stream_loss<double>(x0, idx, out.logits, 8, masks[0].gamma).value;
        EXPECT_NEAR(dual, single, 1e-6);
    }
}

} // namespace
} // namespace cdlm
