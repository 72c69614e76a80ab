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

#include "cdlm/train.hpp"

#include <cmath>
#include <numbers>

#include "cdlm/errors.hpp"
#include "cdlm/trainmask.hpp"

namespace cdlm {

void TrainConfig::validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) throw ConfigError("min_lr_ratio must lie in [0, 1]");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (block_size < 1) throw ConfigError("block_size must be >= 1");
    if (!(ar_alpha >= 0.0 && ar_alpha <= 1.0)) throw ConfigError("ar_alpha must lie in [0, 1]");
}

template <typename T>
SequenceLoss accumulate_sequence_gradient(const Parameters<T>& params, std::span<const TokenId> x0, int block_size,
                                          double alpha, Rng& rng, Parameters<T>& grads, double scale) {
    const auto& cfg = params.config();
    const auto batch = build_dual_stream_batch(x0, static_cast<std::size_t>(block_size), rng, cfg.mask_id());
    Activations<T> acts;
    const auto out = forward_train(params, batch.forward_batch(), acts);
    const std::size_t vocab = out.vocab;

    const auto dual = dual_stream_loss<T>(out.logits, vocab, batch);
    SequenceLoss loss;
    loss.dual = dual.value;
    std::vector<T> dlogits(out.logits.size(), T(0));
    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] = static_cast<T>((1.0 - alpha) * scale) * dual.grad[i];
    if (alpha > 0.0 && x0.size() >= 2) {
        // Memory rows are a plain causal pass over x0.
        const auto memory = std::span<const T>(out.logits).first(x0.size() * vocab);
        const auto ar = ar_aux_loss<T>(memory, vocab, x0);
        loss.ar = ar.value;
        for (std::size_t i = 0; i < ar.grad.size(); ++i) dlogits[i] += static_cast<T>(alpha * scale) * ar.grad[i];
        loss.combined = combined_loss(loss.dual, loss.ar, alpha);
    } else {
        loss.combined = (1.0 - alpha) * loss.dual;
    }
    backward(params, acts, std::span<const T>(dlogits), grads);
    return loss;
}

template SequenceLoss accumulate_sequence_gradient(const Parameters<float>&, std::span<const TokenId>, int, double,
                                                   Rng&, Parameters<float>&, double);
template SequenceLoss accumulate_sequence_gradient(const Parameters<double>&, std::span<const TokenId>, int, double,
                                                   Rng&, Parameters<double>&, double);

AdamW::AdamW(const ModelConfig& config, const TrainConfig& cfg) : cfg_(cfg), m_(config), v_(config) {}

void AdamW::step(Parameters<float>& params, const Parameters<float>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto& ps = params.mutable_tensors();
    auto& ms = m_.mutable_tensors();
    auto& vs = v_.mutable_tensors();
    for (std::size_t t = 0; t < ps.size(); ++t) {
        auto& p = ps[t].data;
        const auto& g = grads.tensors()[t].data;
        auto& m = ms[t].data;
        auto& v = vs[t].data;
        // Gains and biases are not decayed.
        const bool decay = ps[t].dims.size() > 1;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
            v[i] = static_cast<float>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            double update = mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            if (decay) update += cfg_.weight_decay * p[i];
            p[i] = static_cast<float>(p[i] - lr * update);
        }
    }
}

double learning_rate_at(const TrainConfig& cfg, int step) {
    if (step < cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    }
    if (!cfg.cosine_decay || cfg.steps <= cfg.warmup_steps) return cfg.learning_rate;
    const double progress =
        static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.steps - cfg.warmup_steps);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

TrainResult train(const Parameters<float>& init, const Corpus& corpus, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step) {
    cfg.validate();
    if (corpus.empty() && cfg.steps > 0) {
        throw ConfigError("cannot train on an empty corpus");
    }
    for (const auto& seq : corpus) {
        if (seq.size() < 2 || static_cast<int>(seq.size()) > init.config().max_logical_position) {
            throw ConfigError("training sequences need length in [2, max_logical_position]");
        }
    }
    TrainResult result{init, {}};
    auto& params = result.params;
    AdamW opt(params.config(), cfg);
    Rng rng(cfg.seed);
    const double scale = 1.0 / cfg.batch_size;
    for (int step = 0; step < cfg.steps; ++step) {
        Parameters<float> grads(params.config());
        StepLog entry;
        entry.step = step;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& seq = corpus[rng.uniform_int(corpus.size())];
            const auto loss = accumulate_sequence_gradient(params, seq, cfg.block_size, cfg.ar_alpha, rng, grads, scale);
            entry.loss += loss.combined * scale;
            entry.dual += loss.dual * scale;
            entry.ar += loss.ar * scale;
        }
        double norm2 = 0.0;
        for (const auto& t : grads.tensors()) {
            for (float g : t.data) norm2 += static_cast<double>(g) * g;
        }
        entry.grad_norm = std::sqrt(norm2);
        if (cfg.grad_clip > 0.0 && entry.grad_norm > cfg.grad_clip) {
            const auto shrink = static_cast<float>(cfg.grad_clip / entry.grad_norm);
            for (auto& t : grads.mutable_tensors()) {
                for (float& g : t.data) g *= shrink;
            }
        }
        entry.lr = learning_rate_at(cfg, step);
        opt.step(params, grads, entry.lr);
        result.log.push_back(entry);
        if (on_step) on_step(entry);
    }
    return result;
}

double evaluate_dual_loss(const Parameters<float>& params, const Corpus& corpus, int block_size, std::uint64_t seed) {
    if (corpus.empty()) throw ContractError("evaluate_dual_loss needs a non-empty corpus");
    Rng rng(seed);
    double total = 0.0;
    for (const auto& seq : corpus) {
        const auto batch =
            build_dual_stream_batch(seq, static_cast<std::size_t>(block_size), rng, params.config().mask_id());
        const auto out = forward(params, batch.forward_batch());
        total += dual_stream_loss<float>(out.logits, out.vocab, batch).value;
    }
    return total / static_cast<double>(corpus.size());
}

} // namespace cdlm
