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

#pragma once

#include <span>
#include <vector>

#include "cdlm/model.hpp"
#include "cdlm/rng.hpp"

namespace cdlm {

/// Shannon entropy (nats) of softmax(logits / temperature).
/// Throws NumericError on non-finite logits, ConfigError on temperature <= 0.
double softmax_entropy(std::span<const float> logits, double temperature = 1.0);

/// Temperature 0 is argmax with ties going to the smallest id; otherwise a
/// categorical draw from softmax(logits / temperature).
TokenId sample_token(std::span<const float> logits, double temperature, Rng& rng);

/// Numerically stable log-softmax in double precision.
template <typename T>
std::vector<double> log_softmax(std::span<const T> logits);

} // namespace cdlm
