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

#include "cdlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cdlm/errors.hpp"
#include "cdlm/rng.hpp"

namespace cdlm {

namespace ti = tensor_index;

void ModelConfig::validate() const {
    if (num_layers <= 0 || num_heads <= 0 || head_dim <= 0) {
        throw ConfigError("model dimensions must be positive");
    }
    if (head_dim % 2 != 0) {
        throw ConfigError("head_dim must be even for rotary pairs, got " + std::to_string(head_dim));
    }
    if (vocab_size < 4) {
        throw ConfigError("vocab_size must be at least 4, got " + std::to_string(vocab_size));
    }
    if (!(rope_base > 0.0) || !std::isfinite(rope_base)) {
        throw ConfigError("rope_base must be a positive finite number");
    }
    if (max_logical_position <= 0) {
        throw ConfigError("max_logical_position must be positive");
    }
    const TokenId mask = mask_id();
    const TokenId eos = eos_id();
    if (mask >= vocab_size || eos >= vocab_size || mask == eos) {
        throw ConfigError("mask and eos ids must be distinct and below vocab_size");
    }
}

template <typename T>
Parameters<T>::Parameters(const ModelConfig& config) : config_(config) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model());
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const auto f = static_cast<std::size_t>(config.ffn_dim());
    auto add = [this](std::string name, std::vector<std::size_t> dims) {
        std::size_t n = 1;
        for (auto x : dims) n *= x;
        tensors_.push_back(Tensor<T>{std::move(name), std::move(dims), std::vector<T>(n, T(0))});
    };
    add("token_embedding", {v, d});
    add("final_norm", {d});
    add("output", {v, d});
    for (int l = 0; l < config.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        add(p + "attn_norm", {d});
        add(p + "wq", {d, d});
        add(p + "wk", {d, d});
        add(p + "wv", {d, d});
        add(p + "wo", {d, d});
        add(p + "mlp_norm", {d});
        add(p + "w_up", {f, d});
        add(p + "w_down", {d, f});
    }
}

template <typename T>
std::size_t Parameters<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

Parameters<float> init_params(const ModelConfig& config, std::uint64_t seed) {
    Parameters<float> params(config);
    Rng rng(seed);
    const double residual_scale = 1.0 / std::sqrt(2.0 * config.num_layers);
    for (auto& t : params.mutable_tensors()) {
        if (t.dims.size() == 1) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
            continue;
        }
        const bool is_embedding = t.name == "token_embedding";
        const bool is_residual_out = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
        double stddev = is_embedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(t.dims[1]));
        if (is_residual_out) stddev *= residual_scale;
        for (auto& x : t.data) x = static_cast<float>(rng.normal() * stddev);
    }
    return params;
}

std::vector<std::int32_t> VisibilitySpec::visible(std::size_t i, std::size_t cache_len) const {
    std::vector<std::int32_t> out;
    if (causal) {
        out.resize(cache_len + i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<std::int32_t>(j);
        return out;
    }
    out = allowed.at(i);
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// KvCache

template <typename T>
KvCache<T>::KvCache(const ModelConfig& config)
    : width_(static_cast<std::size_t>(config.d_model())),
      keys_(static_cast<std::size_t>(config.num_layers)),
      values_(static_cast<std::size_t>(config.num_layers)) {}

template <typename T>
void KvCache<T>::append(const KvCache& delta, std::size_t count) {
    if (count > delta.size()) {
        throw ContractError("cannot commit more rows than the delta holds");
    }
    if (count == 0) return;
    if (delta.num_layers() != num_layers() || delta.width_ != width_) {
        throw ContractError("cache delta shape does not match the cache");
    }
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].insert(keys_[l].end(), delta.keys_[l].begin(),
                        delta.keys_[l].begin() + static_cast<std::ptrdiff_t>(count * width_));
        values_[l].insert(values_[l].end(), delta.values_[l].begin(),
                          delta.values_[l].begin() + static_cast<std::ptrdiff_t>(count * width_));
    }
    tokens_.insert(tokens_.end(), delta.tokens_.begin(), delta.tokens_.begin() + static_cast<std::ptrdiff_t>(count));
    positions_.insert(positions_.end(), delta.positions_.begin(),
                      delta.positions_.begin() + static_cast<std::ptrdiff_t>(count));
}

template <typename T>
void KvCache<T>::push_row(TokenId token, Position position) {
    for (std::size_t l = 0; l < keys_.size(); ++l) {
        keys_[l].resize(keys_[l].size() + width_, T(0));
        values_[l].resize(values_[l].size() + width_, T(0));
    }
    tokens_.push_back(token);
    positions_.push_back(position);
}

template <typename T>
std::span<T> KvCache<T>::mutable_key_row(int layer, std::size_t row) {
    return {keys_[static_cast<std::size_t>(layer)].data() + row * width_, width_};
}

template <typename T>
std::span<T> KvCache<T>::mutable_value_row(int layer, std::size_t row) {
    return {values_[static_cast<std::size_t>(layer)].data() + row * width_, width_};
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

constexpr double kRmsEps = 1e-5;

// out[i, :] = in[i, :] * W^T for W stored [out_dim, in_dim]. W is transposed
// once so the inner loop is a contiguous axpy.
template <typename T>
void linear(const T* in, std::size_t rows, std::size_t in_dim, const std::vector<T>& w, std::size_t out_dim,
            T* out) {
    std::vector<T> wt(in_dim * out_dim);
    for (std::size_t o = 0; o < out_dim; ++o) {
        for (std::size_t k = 0; k < in_dim; ++k) wt[k * out_dim + o] = w[o * in_dim + k];
    }
    for (std::size_t i = 0; i < rows; ++i) {
        T* dst = out + i * out_dim;
        std::fill(dst, dst + out_dim, T(0));
        const T* src = in + i * in_dim;
        for (std::size_t k = 0; k < in_dim; ++k) {
            const T a = src[k];
            const T* wrow = wt.data() + k * out_dim;
            for (std::size_t o = 0; o < out_dim; ++o) dst[o] += a * wrow[o];
        }
    }
}

// dW[o, :] += sum_i dy[i, o] * x[i, :]
template <typename T>
void accumulate_weight_grad(const T* dy, const T* x, std::size_t rows, std::size_t in_dim, std::size_t out_dim,
                            std::vector<T>& dw) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const T g = dy[i * out_dim + o];
            if (g == T(0)) continue;
            T* row = dw.data() + o * in_dim;
            for (std::size_t k = 0; k < in_dim; ++k) row[k] += g * xi[k];
        }
    }
}

// dx[i, :] += dy[i, :] * W
template <typename T>
void accumulate_input_grad(const T* dy, const std::vector<T>& w, std::size_t rows, std::size_t in_dim,
                           std::size_t out_dim, T* dx) {
    for (std::size_t i = 0; i < rows; ++i) {
        T* dst = dx + i * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
            const T g = dy[i * out_dim + o];
            if (g == T(0)) continue;
            const T* row = w.data() + o * in_dim;
            for (std::size_t k = 0; k < in_dim; ++k) dst[k] += g * row[k];
        }
    }
}

template <typename T>
void rms_norm(const T* x, std::size_t rows, std::size_t dim, const std::vector<T>& gain, T* out, T* inv_out) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * dim;
        T ss = 0;
        for (std::size_t k = 0; k < dim; ++k) ss += xi[k] * xi[k];
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(dim) + static_cast<T>(kRmsEps));
        inv_out[i] = inv;
        for (std::size_t k = 0; k < dim; ++k) out[i * dim + k] = xi[k] * inv * gain[k];
    }
}

template <typename T>
void rms_norm_backward(const T* dy, const T* x, const T* inv, std::size_t rows, std::size_t dim,
                       const std::vector<T>& gain, std::vector<T>& dgain, T* dx) {
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xi = x + i * dim;
        const T* dyi = dy + i * dim;
        T dot = 0;
        for (std::size_t k = 0; k < dim; ++k) {
            dgain[k] += dyi[k] * xi[k] * inv[i];
            dot += gain[k] * dyi[k] * xi[k];
        }
        const T coef = inv[i] * inv[i] * inv[i] * dot / static_cast<T>(dim);
        for (std::size_t k = 0; k < dim; ++k) dx[i * dim + k] += gain[k] * dyi[k] * inv[i] - xi[k] * coef;
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

template <typename T>
T gelu(T h) {
    const T u = static_cast<T>(kGeluC) * (h + static_cast<T>(0.044715) * h * h * h);
    return static_cast<T>(0.5) * h * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T h) {
    const T u = static_cast<T>(kGeluC) * (h + static_cast<T>(0.044715) * h * h * h);
    const T t = std::tanh(u);
    const T du = static_cast<T>(kGeluC) * (T(1) + static_cast<T>(3 * 0.044715) * h * h);
    return static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * h * (T(1) - t * t) * du;
}

// Per-row rotary tables: cos/sin for every (position, pair) combination.
template <typename T>
struct RopeTable {
    std::size_t half = 0;
    std::vector<T> cos, sin;  // [rows, half]

    RopeTable(std::span<const Position> positions, int head_dim, double base) : half(head_dim / 2) {
        cos.resize(positions.size() * half);
        sin.resize(positions.size() * half);
        for (std::size_t r = 0; r < positions.size(); ++r) {
            for (std::size_t i = 0; i < half; ++i) {
                const double freq = std::pow(base, -2.0 * static_cast<double>(i) / head_dim);
                const double angle = static_cast<double>(positions[r]) * freq;
                cos[r * half + i] = static_cast<T>(std::cos(angle));
                sin[r * half + i] = static_cast<T>(std::sin(angle));
            }
        }
    }

    // direction +1 rotates forward; -1 applies the transpose (for gradients).
    void apply(T* rows, std::size_t n, int heads, int head_dim, int direction) const {
        const std::size_t d = static_cast<std::size_t>(heads * head_dim);
        for (std::size_t r = 0; r < n; ++r) {
            for (int h = 0; h < heads; ++h) {
                T* x = rows + r * d + static_cast<std::size_t>(h * head_dim);
                for (std::size_t i = 0; i < half; ++i) {
                    const T c = cos[r * half + i];
                    const T s = direction > 0 ? sin[r * half + i] : -sin[r * half + i];
                    const T a = x[2 * i];
                    const T b = x[2 * i + 1];
                    x[2 * i] = a * c - b * s;
                    x[2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
};

template <typename T>
void check_inputs(const Parameters<T>& params, const ForwardBatch& batch, const KvCache<T>& cache) {
    const auto& cfg = params.config();
    if (batch.tokens.size() != batch.positions.size()) {
        throw ContractError("batch tokens and positions differ in length");
    }
    for (TokenId t : batch.tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw RangeError("token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    for (Position p : batch.positions) {
        if (p < 0 || p > cfg.max_logical_position) {
            throw RangeError("logical position " + std::to_string(p) + " outside [0, " +
                             std::to_string(cfg.max_logical_position) + "]");
        }
    }
    if (!cache.empty() &&
        (cache.num_layers() != cfg.num_layers || cache.row_width() != static_cast<std::size_t>(cfg.d_model()))) {
        throw ContractError("KV cache shape does not match the model");
    }
    if (!batch.visibility.causal) {
        const auto& lists = batch.visibility.allowed;
        if (lists.size() != batch.tokens.size()) {
            throw ContractError("visibility must list one entry per batch token");
        }
        for (std::size_t i = 0; i < lists.size(); ++i) {
            const auto self = static_cast<std::int64_t>(cache.size() + i);
            for (std::int32_t j : lists[i]) {
                if (j < 0 || j >= self) {
                    throw ContractError("visibility of query " + std::to_string(i) + " references physical index " +
                                        std::to_string(j) + ", which is not strictly earlier");
                }
            }
        }
    }
}

template <typename T>
ForwardOutput<T> run_forward(const Parameters<T>& params, const ForwardBatch& batch, const KvCache<T>& cache,
                             Activations<T>* acts) {
    check_inputs(params, batch, cache);
    const auto& cfg = params.config();
    const std::size_t n = batch.tokens.size();
    const std::size_t c = cache.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model());
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim());
    const std::size_t vocab = static_cast<std::size_t>(cfg.vocab_size);
    const int heads = cfg.num_heads;
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim)));
    const std::size_t total = c + n;

    ForwardOutput<T> out;
    out.rows = n;
    out.vocab = vocab;
    out.logits.assign(n * vocab, T(0));
    out.delta = KvCache<T>(cfg);
    for (std::size_t i = 0; i < n; ++i) out.delta.push_row(batch.tokens[i], batch.positions[i]);

    std::vector<std::vector<std::int32_t>> keys_of(n);
    for (std::size_t i = 0; i < n; ++i) {
        keys_of[i] = batch.visibility.visible(i, c);
        if (!batch.visibility.causal) {
            auto& ks = keys_of[i];
            if (std::adjacent_find(ks.begin(), ks.end()) != ks.end()) {
                throw ContractError("visibility list of query " + std::to_string(i) + " has duplicates");
            }
        }
        keys_of[i].push_back(static_cast<std::int32_t>(c + i));
    }

    const RopeTable<T> rope(batch.positions, cfg.head_dim, cfg.rope_base);

    std::vector<T> x(n * d);
    const auto& emb = params.global(ti::kTokenEmbedding).data;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(emb.data() + static_cast<std::size_t>(batch.tokens[i]) * d, d, x.data() + i * d);
    }

    if (acts != nullptr) {
        acts->tokens = batch.tokens;
        acts->positions = batch.positions;
        acts->keys_of = keys_of;
        acts->layers.assign(static_cast<std::size_t>(cfg.num_layers), {});
    }

    std::vector<T> xn(n * d), q(n * d), k(n * d), v(n * d), attn(n * d), proj(n * d), inv(n);
    std::vector<T> hidden(n * f), act(n * f), scores;
    for (int l = 0; l < cfg.num_layers; ++l) {
        typename Activations<T>::Layer* rec = acts != nullptr ? &acts->layers[static_cast<std::size_t>(l)] : nullptr;
        if (rec != nullptr) rec->x_in = x;

        rms_norm(x.data(), n, d, params.layer(l, ti::kAttnNorm).data, xn.data(), inv.data());
        if (rec != nullptr) {
            rec->inv_rms1 = inv;
            rec->xn1 = xn;
        }
        linear(xn.data(), n, d, params.layer(l, ti::kWq).data, d, q.data());
        linear(xn.data(), n, d, params.layer(l, ti::kWk).data, d, k.data());
        linear(xn.data(), n, d, params.layer(l, ti::kWv).data, d, v.data());
        rope.apply(q.data(), n, heads, cfg.head_dim, +1);
        rope.apply(k.data(), n, heads, cfg.head_dim, +1);

        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(k.data() + i * d, d, out.delta.mutable_key_row(l, i).data());
            std::copy_n(v.data() + i * d, d, out.delta.mutable_value_row(l, i).data());
        }
        if (rec != nullptr) {
            rec->q = q;
            rec->k = k;
            rec->v = v;
            rec->probs.assign(static_cast<std::size_t>(heads) * n * total, T(0));
        }

        const auto cache_k = cache.empty() ? std::span<const T>{} : cache.keys(l);
        const auto cache_v = cache.empty() ? std::span<const T>{} : cache.values(l);
        auto key_row = [&](std::int32_t j) -> const T* {
            const auto ju = static_cast<std::size_t>(j);
            return ju < c ? cache_k.data() + ju * d : k.data() + (ju - c) * d;
        };
        auto value_row = [&](std::int32_t j) -> const T* {
            const auto ju = static_cast<std::size_t>(j);
            return ju < c ? cache_v.data() + ju * d : v.data() + (ju - c) * d;
        };

        std::fill(attn.begin(), attn.end(), T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ks = keys_of[i];
            scores.resize(ks.size());
            for (int h = 0; h < heads; ++h) {
                const std::size_t off = static_cast<std::size_t>(h) * hd;
                const T* qi = q.data() + i * d + off;
                T maxs = -std::numeric_limits<T>::infinity();
                for (std::size_t a = 0; a < ks.size(); ++a) {
                    const T* kj = key_row(ks[a]) + off;
                    T s = 0;
                    for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
                    s *= scale;
                    scores[a] = s;
                    maxs = std::max(maxs, s);
                }
                T sum = 0;
                for (auto& s : scores) {
                    s = std::exp(s - maxs);
                    sum += s;
                }
                T* oi = attn.data() + i * d + off;
                for (std::size_t a = 0; a < ks.size(); ++a) {
                    const T p = scores[a] / sum;
                    if (rec != nullptr) {
                        rec->probs[(static_cast<std::size_t>(h) * n + i) * total + static_cast<std::size_t>(ks[a])] = p;
                    }
                    const T* vj = value_row(ks[a]) + off;
                    for (std::size_t e = 0; e < hd; ++e) oi[e] += p * vj[e];
                }
            }
        }
        if (rec != nullptr) rec->attn = attn;

        linear(attn.data(), n, d, params.layer(l, ti::kWo).data, d, proj.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
        if (rec != nullptr) rec->x_mid = x;

        rms_norm(x.data(), n, d, params.layer(l, ti::kMlpNorm).data, xn.data(), inv.data());
        if (rec != nullptr) {
            rec->inv_rms2 = inv;
            rec->xn2 = xn;
        }
        linear(xn.data(), n, d, params.layer(l, ti::kWUp).data, f, hidden.data());
        for (std::size_t i = 0; i < n * f; ++i) act[i] = gelu(hidden[i]);
        if (rec != nullptr) {
            rec->hidden = hidden;
            rec->act = act;
        }
        linear(act.data(), n, f, params.layer(l, ti::kWDown).data, d, proj.data());
        for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
    }

    if (acts != nullptr) acts->x_final = x;
    rms_norm(x.data(), n, d, params.global(ti::kFinalNorm).data, xn.data(), inv.data());
    if (acts != nullptr) {
        acts->inv_rms_final = inv;
        acts->xf = xn;
    }
    linear(xn.data(), n, d, params.global(ti::kOutput).data, vocab, out.logits.data());
    return out;
}

} // namespace

template <typename T>
ForwardOutput<T> forward(const Parameters<T>& params, const ForwardBatch& batch, const KvCache<T>& cache) {
    return run_forward<T>(params, batch, cache, nullptr);
}

template <typename T>
ForwardOutput<T> forward_train(const Parameters<T>& params, const ForwardBatch& batch, Activations<T>& acts) {
    return run_forward(params, batch, KvCache<T>(params.config()), &acts);
}

template <typename T>
void backward(const Parameters<T>& params, const Activations<T>& acts, std::span<const T> dlogits,
              Parameters<T>& grads) {
    const auto& cfg = params.config();
    const std::size_t n = acts.tokens.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model());
    const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim());
    const std::size_t vocab = static_cast<std::size_t>(cfg.vocab_size);
    const int heads = cfg.num_heads;
    const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim)));
    if (dlogits.size() != n * vocab) {
        throw ContractError("dlogits shape does not match the recorded forward pass");
    }
    if (!(grads.config() == cfg)) {
        throw ContractError("gradient buffer was built for a different config");
    }

    const RopeTable<T> rope(acts.positions, cfg.head_dim, cfg.rope_base);

    // Output projection and final norm.
    accumulate_weight_grad(dlogits.data(), acts.xf.data(), n, d, vocab, grads.mutable_global(ti::kOutput).data);
    std::vector<T> dxf(n * d, T(0));
    accumulate_input_grad(dlogits.data(), params.global(ti::kOutput).data, n, d, vocab, dxf.data());
    std::vector<T> dx(n * d, T(0));
    rms_norm_backward(dxf.data(), acts.x_final.data(), acts.inv_rms_final.data(), n, d,
                      params.global(ti::kFinalNorm).data, grads.mutable_global(ti::kFinalNorm).data, dx.data());

    std::vector<T> dact(n * f), dhidden(n * f), dxn(n * d), dattn(n * d), dq(n * d), dk(n * d), dv(n * d);
    std::vector<T> dp;
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& rec = acts.layers[static_cast<std::size_t>(l)];

        // Feed-forward branch: x_out = x_mid + W_down * gelu(W_up * norm(x_mid)).
        accumulate_weight_grad(dx.data(), rec.act.data(), n, f, d, grads.mutable_layer(l, ti::kWDown).data);
        std::fill(dact.begin(), dact.end(), T(0));
        accumulate_input_grad(dx.data(), params.layer(l, ti::kWDown).data, n, f, d, dact.data());
        for (std::size_t i = 0; i < n * f; ++i) dhidden[i] = dact[i] * gelu_grad(rec.hidden[i]);
        accumulate_weight_grad(dhidden.data(), rec.xn2.data(), n, d, f, grads.mutable_layer(l, ti::kWUp).data);
        std::fill(dxn.begin(), dxn.end(), T(0));
        accumulate_input_grad(dhidden.data(), params.layer(l, ti::kWUp).data, n, d, f, dxn.data());
        rms_norm_backward(dxn.data(), rec.x_mid.data(), rec.inv_rms2.data(), n, d, params.layer(l, ti::kMlpNorm).data,
                          grads.mutable_layer(l, ti::kMlpNorm).data, dx.data());

        // Attention branch: x_mid = x_in + W_o * attention(norm(x_in)).
        accumulate_weight_grad(dx.data(), rec.attn.data(), n, d, d, grads.mutable_layer(l, ti::kWo).data);
        std::fill(dattn.begin(), dattn.end(), T(0));
        accumulate_input_grad(dx.data(), params.layer(l, ti::kWo).data, n, d, d, dattn.data());

        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ks = acts.keys_of[i];
            dp.resize(ks.size());
            for (int h = 0; h < heads; ++h) {
                const std::size_t off = static_cast<std::size_t>(h) * hd;
                const T* prow = rec.probs.data() + (static_cast<std::size_t>(h) * n + i) * n;
                const T* go = dattn.data() + i * d + off;
                T weighted = 0;
                for (std::size_t a = 0; a < ks.size(); ++a) {
                    const auto j = static_cast<std::size_t>(ks[a]);
                    const T* vj = rec.v.data() + j * d + off;
                    T s = 0;
                    for (std::size_t e = 0; e < hd; ++e) s += go[e] * vj[e];
                    dp[a] = s;
                    weighted += prow[j] * s;
                }
                const T* qi = rec.q.data() + i * d + off;
                T* dqi = dq.data() + i * d + off;
                for (std::size_t a = 0; a < ks.size(); ++a) {
                    const auto j = static_cast<std::size_t>(ks[a]);
                    const T p = prow[j];
                    T* dvj = dv.data() + j * d + off;
                    for (std::size_t e = 0; e < hd; ++e) dvj[e] += p * go[e];
                    const T ds = p * (dp[a] - weighted) * scale;
                    const T* kj = rec.k.data() + j * d + off;
                    T* dkj = dk.data() + j * d + off;
                    for (std::size_t e = 0; e < hd; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * qi[e];
                    }
                }
            }
        }
        rope.apply(dq.data(), n, heads, cfg.head_dim, -1);
        rope.apply(dk.data(), n, heads, cfg.head_dim, -1);

        accumulate_weight_grad(dq.data(), rec.xn1.data(), n, d, d, grads.mutable_layer(l, ti::kWq).data);
        accumulate_weight_grad(dk.data(), rec.xn1.data(), n, d, d, grads.mutable_layer(l, ti::kWk).data);
        accumulate_weight_grad(dv.data(), rec.xn1.data(), n, d, d, grads.mutable_layer(l, ti::kWv).data);
        std::fill(dxn.begin(), dxn.end(), T(0));
        accumulate_input_grad(dq.data(), params.layer(l, ti::kWq).data, n, d, d, dxn.data());
        accumulate_input_grad(dk.data(), params.layer(l, ti::kWk).data, n, d, d, dxn.data());
        accumulate_input_grad(dv.data(), params.layer(l, ti::kWv).data, n, d, d, dxn.data());
        rms_norm_backward(dxn.data(), rec.x_in.data(), rec.inv_rms1.data(), n, d, params.layer(l, ti::kAttnNorm).data,
                          grads.mutable_layer(l, ti::kAttnNorm).data, dx.data());
    }

    auto& demb = grads.mutable_global(ti::kTokenEmbedding).data;
    for (std::size_t i = 0; i < n; ++i) {
        T* row = demb.data() + static_cast<std::size_t>(acts.tokens[i]) * d;
        for (std::size_t e = 0; e < d; ++e) row[e] += dx[i * d + e];
    }
}

template class Parameters<float>;
template class Parameters<double>;
template class KvCache<float>;
template class KvCache<double>;
template ForwardOutput<float> forward(const Parameters<float>&, const ForwardBatch&, const KvCache<float>&);
template ForwardOutput<double> forward(const Parameters<double>&, const ForwardBatch&, const KvCache<double>&);
template ForwardOutput<float> forward_train(const Parameters<float>&, const ForwardBatch&, Activations<float>&);
template ForwardOutput<double> forward_train(const Parameters<double>&, const ForwardBatch&, Activations<double>&);
template void backward(const Parameters<float>&, const Activations<float>&, std::span<const float>,
                       Parameters<float>&);
template void backward(const Parameters<double>&, const Activations<double>&, std::span<const double>,
                       Parameters<double>&);

} // namespace cdlm
