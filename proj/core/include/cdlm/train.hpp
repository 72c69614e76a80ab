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

// Single-threaded training on the dual-stream objective plus an auxiliary
// next-token loss read from the memory stream.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cdlm/model.hpp"
#include "cdlm/rng.hpp"
#include "cdlm/synth.hpp"

namespace cdlm {

struct TrainConfig {
    int steps = 2000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    bool cosine_decay = false;
    double min_lr_ratio = 0.1;  // floor of the cosine schedule
    int warmup_steps = 0;
    double grad_clip = 1.0;     // global L2 norm; <= 0 disables
    int block_size = 8;
    double ar_alpha = 0.1;
    std::uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;
};

struct StepLog {
    int step = 0;
    double loss = 0.0;  // combined, mean over the batch
    double dual = 0.0;
    double ar = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct SequenceLoss {
    double combined = 0.0;
    double dual = 0.0;
    double ar = 0.0;
};

/// Samples masks for one sequence, runs the dual-stream forward and adds
/// scale * d(combined)/d(params) into `grads`.
template <typename T>
SequenceLoss accumulate_sequence_gradient(const Parameters<T>& params, std::span<const TokenId> x0, int block_size,
                                          double alpha, Rng& rng, Parameters<T>& grads, double scale = 1.0);

class AdamW {
public:
    AdamW(const ModelConfig& config, const TrainConfig& cfg);
    void step(Parameters<float>& params, const Parameters<float>& grads, double lr);

private:
    TrainConfig cfg_;
    Parameters<float> m_;
    Parameters<float> v_;
    long long t_ = 0;
};

double learning_rate_at(const TrainConfig& cfg, int step);

struct TrainResult {
    Parameters<float> params;
    std::vector<StepLog> log;
};

/// Deterministic for fixed inputs. `on_step` sees every step's log entry.
TrainResult train(const Parameters<float>& init, const Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step = {});

/// Mean dual-stream loss over `corpus` with masks drawn from `seed`; used to
/// compare initial and final models on identical masks.
double evaluate_dual_loss(const Parameters<float>& params, const Corpus& corpus, int block_size, std::uint64_t seed);

} // namespace cdlm
