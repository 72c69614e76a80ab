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

#include "cdlm/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "cdlm/errors.hpp"

namespace cdlm {

template <typename T>
std::vector<double> log_softmax(std::span<const T> logits) {
    std::vector<double> out(logits.size());
    double maxv = -INFINITY;
    for (T x : logits) maxv = std::max(maxv, static_cast<double>(x));
    double sum = 0.0;
    for (T x : logits) sum += std::exp(static_cast<double>(x) - maxv);
    const double lse = maxv + std::log(sum);
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
    return out;
}

template std::vector<double> log_softmax(std::span<const float>);
template std::vector<double> log_softmax(std::span<const double>);

double softmax_entropy(std::span<const float> logits, double temperature) {
    if (!(temperature > 0.0)) {
        throw ConfigError("entropy temperature must be positive");
    }
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(logits[i])) {
            throw NumericError("non-finite logit at index " + std::to_string(i));
        }
        scaled[i] = static_cast<double>(logits[i]) / temperature;
    }
    const auto logp = log_softmax<double>(scaled);
    double h = 0.0;
    for (double lp : logp) {
        const double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    return std::max(h, 0.0);
}

TokenId sample_token(std::span<const float> logits, double temperature, Rng& rng) {
    if (logits.empty()) {
        throw ContractError("cannot sample from an empty logit row");
    }
    if (temperature <= 0.0) {
        // max_element returns the first maximum, i.e. the smallest id.
        return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = static_cast<double>(logits[i]) / temperature;
    const auto logp = log_softmax<double>(scaled);
    const double u = rng.uniform01();
    double acc = 0.0;
    for (std::size_t i = 0; i < logp.size(); ++i) {
        acc += std::exp(logp[i]);
        if (u < acc) return static_cast<TokenId>(i);
    }
    // Rounding left the cumulative mass just under u; fall back to the last
    // token with non-zero probability.
    for (std::size_t i = logp.size(); i-- > 0;) {
        if (std::exp(logp[i]) > 0.0) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(logp.size() - 1);
}

} // namespace cdlm
