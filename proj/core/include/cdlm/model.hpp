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

// Decoder-only transformer with rotary attention indexed by caller-supplied
// logical positions. Pre-norm residual blocks (RMSNorm, multi-head attention,
// 4x GELU feed-forward), untied output projection.
//
// Three entry points share one kernel:
//   forward()        inference; extends an optional KV cache, any visibility.
//   forward_train()  same math on an empty cache, keeps activations.
//   backward()       parameter gradients from d(loss)/d(logits).
//
// Everything is templated on the scalar so gradient checks can run in double
// while decoding and training run in float.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cdlm {

using TokenId = std::int32_t;
using Position = std::int32_t;

struct ModelConfig {
    int num_layers = 2;
    int num_heads = 4;
    int head_dim = 16;
    int vocab_size = 32;
    double rope_base = 10000.0;
    int max_logical_position = 256;
    /// Reserved ids; negative means "use the default" (vocab-1 / vocab-2).
    TokenId mask_token = -1;
    TokenId eos_token = -1;

    int d_model() const { return num_heads * head_dim; }
    int ffn_dim() const { return 4 * d_model(); }
    TokenId mask_id() const { return mask_token >= 0 ? mask_token : vocab_size - 1; }
    TokenId eos_id() const { return eos_token >= 0 ? eos_token : vocab_size - 2; }

    /// Throws ConfigError when an invariant does not hold.
    void validate() const;

    /// Compares resolved reserved ids, so -1 equals an explicit default.
    bool operator==(const ModelConfig& o) const {
        return num_layers == o.num_layers && num_heads == o.num_heads && head_dim == o.head_dim &&
               vocab_size == o.vocab_size && rope_base == o.rope_base &&
               max_logical_position == o.max_logical_position && mask_id() == o.mask_id() && eos_id() == o.eos_id();
    }
};

template <typename T>
struct Tensor {
    std::string name;
    std::vector<std::size_t> dims;
    std::vector<T> data;

    std::size_t size() const { return data.size(); }
    bool operator==(const Tensor&) const = default;
};

/// Index of each tensor inside Parameters::tensors().
namespace tensor_index {
inline constexpr std::size_t kTokenEmbedding = 0;  // [vocab, d]
inline constexpr std::size_t kFinalNorm = 1;       // [d]
inline constexpr std::size_t kOutput = 2;          // [vocab, d]
inline constexpr std::size_t kGlobalCount = 3;
inline constexpr std::size_t kPerLayer = 8;
// Per-layer offsets.
inline constexpr std::size_t kAttnNorm = 0;  // [d]
inline constexpr std::size_t kWq = 1;        // [d, d]
inline constexpr std::size_t kWk = 2;        // [d, d]
inline constexpr std::size_t kWv = 3;        // [d, d]
inline constexpr std::size_t kWo = 4;        // [d, d]
inline constexpr std::size_t kMlpNorm = 5;   // [d]
inline constexpr std::size_t kWUp = 6;       // [4d, d]
inline constexpr std::size_t kWDown = 7;     // [d, 4d]
} // namespace tensor_index

/// Model weights. Shapes are a pure function of the config; weight matrices
/// are row-major [out, in].
template <typename T>
class Parameters {
public:
    Parameters() = default;
    /// All-zero parameters with the layout implied by `config`.
    explicit Parameters(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const std::vector<Tensor<T>>& tensors() const { return tensors_; }
    std::vector<Tensor<T>>& mutable_tensors() { return tensors_; }

    const Tensor<T>& global(std::size_t index) const { return tensors_[index]; }
    const Tensor<T>& layer(int l, std::size_t offset) const {
        return tensors_[tensor_index::kGlobalCount + static_cast<std::size_t>(l) * tensor_index::kPerLayer +
                        offset];
    }
    Tensor<T>& mutable_layer(int l, std::size_t offset) {
        return tensors_[tensor_index::kGlobalCount + static_cast<std::size_t>(l) * tensor_index::kPerLayer +
                        offset];
    }
    Tensor<T>& mutable_global(std::size_t index) { return tensors_[index]; }

    std::size_t parameter_count() const;

    template <typename U>
    Parameters<U> cast() const {
        Parameters<U> out(config_);
        for (std::size_t t = 0; t < tensors_.size(); ++t) {
            auto& dst = out.mutable_tensors()[t].data;
            for (std::size_t i = 0; i < tensors_[t].data.size(); ++i) {
                dst[i] = static_cast<U>(tensors_[t].data[i]);
            }
        }
        return out;
    }

    bool operator==(const Parameters&) const = default;

private:
    ModelConfig config_;
    std::vector<Tensor<T>> tensors_;
};

/// Deterministic init: N(0, 1/fan_in) for projections, residual outputs
/// further scaled by 1/sqrt(2 * layers), norm gains at 1.
Parameters<float> init_params(const ModelConfig& config, std::uint64_t seed);

/// Who may attend to whom. Indices are physical and count the KV cache first,
/// so query i of a batch sits at physical index cache_len + i. A query always
/// attends to itself; `allowed` lists the other keys it may see, each
/// strictly earlier in physical order.
struct VisibilitySpec {
    bool causal = true;
    std::vector<std::vector<std::int32_t>> allowed;

    static VisibilitySpec plain_causal() { return {}; }
    static VisibilitySpec from_lists(std::vector<std::vector<std::int32_t>> lists) {
        return VisibilitySpec{false, std::move(lists)};
    }

    /// Key physical indices visible to query `i` (self excluded), in ascending order.
    std::vector<std::int32_t> visible(std::size_t i, std::size_t cache_len) const;
};

struct ForwardBatch {
    std::vector<TokenId> tokens;
    std::vector<Position> positions;
    VisibilitySpec visibility;
};

/// Committed key/value rows per layer, in physical (commit) order. Keys are
/// stored after rotation. Rows are only ever appended.
template <typename T>
class KvCache {
public:
    KvCache() = default;
    explicit KvCache(const ModelConfig& config);

    std::size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }
    int num_layers() const { return static_cast<int>(keys_.size()); }
    std::size_t row_width() const { return width_; }

    std::span<const T> keys(int layer) const { return keys_[static_cast<std::size_t>(layer)]; }
    std::span<const T> values(int layer) const { return values_[static_cast<std::size_t>(layer)]; }
    std::span<const TokenId> tokens() const { return tokens_; }
    std::span<const Position> positions() const { return positions_; }

    /// Appends the first `count` rows of `delta`.
    void append(const KvCache& delta, std::size_t count);
    void append(const KvCache& delta) { append(delta, delta.size()); }

    /// Adds one row of keys/values for every layer (used to build deltas).
    void push_row(TokenId token, Position position);
    std::span<T> mutable_key_row(int layer, std::size_t row);
    std::span<T> mutable_value_row(int layer, std::size_t row);

    /// Fault injection hook for tests: raw access to committed keys.
    std::vector<T>& mutable_keys(int layer) { return keys_[static_cast<std::size_t>(layer)]; }

private:
    std::size_t width_ = 0;
    std::vector<std::vector<T>> keys_;
    std::vector<std::vector<T>> values_;
    std::vector<TokenId> tokens_;
    std::vector<Position> positions_;
};

template <typename T>
struct ForwardOutput {
    std::size_t rows = 0;
    std::size_t vocab = 0;
    std::vector<T> logits;  // [rows, vocab]
    KvCache<T> delta;       // one row per input token

    std::span<const T> row(std::size_t i) const { return {logits.data() + i * vocab, vocab}; }
};

/// Saved intermediates of forward_train(); consumed by backward().
template <typename T>
struct Activations {
    struct Layer {
        std::vector<T> x_in, inv_rms1, xn1, q, k, v, probs, attn, x_mid, inv_rms2, xn2, hidden, act;
    };
    std::vector<TokenId> tokens;
    std::vector<Position> positions;
    std::vector<std::vector<std::int32_t>> keys_of;  // per query, visible keys incl. self
    std::vector<Layer> layers;
    std::vector<T> x_final, inv_rms_final, xf;
};

template <typename T>
ForwardOutput<T> forward(const Parameters<T>& params, const ForwardBatch& batch, const KvCache<T>& cache);

template <typename T>
ForwardOutput<T> forward(const Parameters<T>& params, const ForwardBatch& batch) {
    return forward(params, batch, KvCache<T>(params.config()));
}

/// Forward pass over `batch` from an empty cache, recording activations.
template <typename T>
ForwardOutput<T> forward_train(const Parameters<T>& params, const ForwardBatch& batch, Activations<T>& acts);

/// Accumulates parameter gradients into `grads` given d(loss)/d(logits) laid
/// out like ForwardOutput::logits.
template <typename T>
void backward(const Parameters<T>& params, const Activations<T>& acts, std::span<const T> dlogits,
              Parameters<T>& grads);

} // namespace cdlm
