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

#include "cdlm/errors.hpp"
#include "cdlm/train.hpp"
#include "cdlm/trainmask.hpp"

namespace cdlm {
namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.num_layers = 1;
    c.num_heads = 2;
    c.head_dim = 4;
    c.vocab_size = 16;
    c.max_logical_position = 32;
    return c;
}

Corpus small_corpus() {
    CorpusSpec s;
    s.vocab_size = 16;
    s.sequence_length = 12;
    s.num_sequences = 16;
    s.seed = 3;
    return generate(s);
}

bool same_params(const Parameters<float>& a, const Parameters<float>& b) {
    for (std::size_t t = 0; t < a.tensors().size(); ++t) {
        if (a.tensors()[t].data != b.tensors()[t].data) return false;
    }
    return true;
}

TEST(Train, ZeroStepsReturnsInitialParameters) {
    const auto init = init_params(small_config(), 1);
    TrainConfig cfg;
    cfg.steps = 0;
    const auto r = train(init, small_corpus(), cfg);
    EXPECT_TRUE(same_params(r.params, init));
    EXPECT_TRUE(r.log.empty());
}

TEST(Train, DeterministicForFixedSeed) {
    const auto init = init_params(small_config(), 1);
    TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch_size = 2;
    cfg.block_size = 4;
    cfg.seed = 9;
    const auto a = train(init, small_corpus(), cfg);
    const auto b = train(init, small_corpus(), cfg);
    EXPECT_TRUE(same_params(a.params, b.params));
    ASSERT_EQ(a.log.size(), 5u);
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_FALSE(same_params(a.params, init));
}

TEST(Train, LossDecreasesOnCountingCorpus) {
    const auto init = init_params(small_config(), 2);
    TrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 4;
    cfg.block_size = 4;
    cfg.learning_rate = 3e-3;
    const auto corpus = small_corpus();
    const auto r = train(init, corpus, cfg);
    EXPECT_LT(evaluate_dual_loss(r.params, corpus, 4, 77), 0.8 * evaluate_dual_loss(init, corpus, 4, 77));
}

TEST(Train, CombinedLossMatchesParts) {
    const auto init = init_params(small_config(), 1);
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch_size = 2;
    cfg.block_size = 4;
    const auto r = train(init, small_corpus(), cfg);
    for (const auto& s : r.log) EXPECT_NEAR(s.loss, combined_loss(s.dual, s.ar, cfg.ar_alpha), 1e-9 * (1 + s.loss));
}

TEST(LearningRate, WarmupAndCosine) {
    TrainConfig cfg;
    cfg.steps = 100;
    cfg.learning_rate = 1.0;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 0), 1.0);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 99), 1.0);
    cfg.warmup_steps = 10;
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 0), 0.1);
    EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 9), 1.0);
    cfg.cosine_decay = true;
    cfg.min_lr_ratio = 0.1;
    EXPECT_NEAR(learning_rate_at(cfg, 99), 0.1, 1e-3);
    for (int s = 10; s < 99; ++s) EXPECT_GE(learning_rate_at(cfg, s), learning_rate_at(cfg, s + 1));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    const auto c = small_config();
    auto params = init_params(c, 1);
    const auto before = params;
    Parameters<float> grads(c);
    for (auto& t : grads.mutable_tensors()) for (auto& v : t.data) v = 0.5f;
    TrainConfig cfg;
    AdamW opt(c, cfg);
    opt.step(params, grads, 0.01);
    for (std::size_t t = 0; t < params.tensors().size(); ++t) {
        for (std::size_t i = 0; i < params.tensors()[t].data.size(); ++i) {
            // Bias-corrected first step is lr * sign(g) for |g| >> eps.
            EXPECT_NEAR(params.tensors()[t].data[i], before.tensors()[t].data[i] - 0.01f, 1e-6f);
        }
    }
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.ar_alpha = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.learning_rate = -1;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

} // namespace
} // namespace cdlm
