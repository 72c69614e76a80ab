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

#include "cdlm/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>

#include <nlohmann/json.hpp>

#include "cdlm/errors.hpp"
#include "cdlm/reorder.hpp"
#include "cdlm/rng.hpp"
#include "cdlm/sampling.hpp"

namespace cdlm {

void DecodeConfig::validate() const {
    if (window_size < 1) throw ConfigError("window_size must be >= 1");
    if (block_size < 1) throw ConfigError("block_size must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    if (!(entropy_threshold >= 0.0)) throw ConfigError("entropy_threshold must be >= 0");
    if (!(distance_penalty >= 0.0)) throw ConfigError("distance_penalty must be >= 0");
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (!(entropy_temperature > 0.0)) throw ConfigError("entropy_temperature must be > 0");
}

void DecodeStats::record_commit(std::size_t count) {
    if (committed_per_forward.size() <= count) committed_per_forward.resize(count + 1, 0);
    ++committed_per_forward[count];
}

double compute_pcache(const DecodeStats& stats) {
    if (stats.n_fwd == 0) {
        throw ContractError("p_cache is undefined when no token instances were processed");
    }
    return static_cast<double>(stats.n_gen) / static_cast<double>(stats.n_fwd);
}

ForwardOutput<float> TransformerModel::run(std::span<const TokenId> tokens, std::span<const Position> positions,
                                           const KvCache<float>& cache) const {
    ForwardBatch batch{{tokens.begin(), tokens.end()}, {positions.begin(), positions.end()},
                       VisibilitySpec::plain_causal()};
    return forward(params_, batch, cache);
}

std::vector<std::size_t> select_by_entropy(std::span<const double> entropies, std::span<const double> distances,
                                           double tau, double lambda) {
    if (entropies.empty()) {
        throw ContractError("select_by_entropy needs at least one mask slot");
    }
    if (entropies.size() != distances.size()) {
        throw ContractError("select_by_entropy: entropies and distances differ in length");
    }
    std::vector<std::size_t> chosen;
    std::size_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entropies.size(); ++i) {
        const double score = entropies[i] + lambda * distances[i];
        if (score < tau) chosen.push_back(i);
        if (score < best_score || (score == best_score && distances[i] < distances[best])) {
            best = i;
            best_score = score;
        }
    }
    if (chosen.empty()) chosen.push_back(best);
    return chosen;
}

void write_trace_record(std::ostream& out, const ForwardRecord& record) {
    nlohmann::json window = nlohmann::json::array();
    for (const auto& s : record.window) {
        if (s.state == SlotState::kFilled) {
            window.push_back({"F", s.token, s.position});
        } else {
            window.push_back({"M", nullptr, s.position});
        }
    }
    nlohmann::json j = {{"iteration", record.iteration},
                        {"window", window},
                        {"selected", record.selected},
                        {"committed", record.committed}};
    out << j.dump() << '\n';
}

namespace {

using Clock = std::chrono::steady_clock;

void check_request(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) {
        throw ContractError("decode needs a non-empty prompt");
    }
    const auto& mc = model.config();
    const auto budget = static_cast<long long>(prompt.size()) + cfg.max_new_tokens;
    if (budget > mc.max_logical_position) {
        throw ConfigError("prompt length + max_new_tokens = " + std::to_string(budget) +
                          " exceeds max_logical_position " + std::to_string(mc.max_logical_position));
    }
    for (TokenId t : prompt) {
        if (t < 0 || t >= mc.vocab_size) {
            throw RangeError("prompt token " + std::to_string(t) + " outside vocabulary");
        }
    }
}

// Shared plumbing: the prompt cache, the output buffer keyed by logical
// position, stats, and tracing.
class Session {
public:
    Session(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg, DecodeTrace* trace,
            std::ostream* log)
        : model_(model),
          cfg_(cfg),
          trace_(trace),
          log_(log),
          rng_(cfg.seed),
          cache_(model.config()),
          prompt_len_(static_cast<Position>(prompt.size())),
          eos_(model.config().eos_id()),
          mask_(model.config().mask_id()),
          start_(Clock::now()) {
        std::vector<Position> positions(prompt.size());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<Position>(i + 1);
        auto out = model.run(prompt, positions, cache_);
        cache_.append(out.delta);
    }

    Position first_new() const { return prompt_len_ + 1; }
    Position last_allowed() const { return prompt_len_ + cfg_.max_new_tokens; }
    TokenId eos() const { return eos_; }
    TokenId mask() const { return mask_; }
    const DecodeConfig& cfg() const { return cfg_; }
    Rng& rng() { return rng_; }
    DecodeStats& stats() { return stats_; }

    // Forward `tokens` after the cache; the first `commit` rows are appended
    // to the cache right after.
    ForwardOutput<float> forward(const std::vector<TokenId>& tokens, const std::vector<Position>& positions,
                                 std::size_t commit, std::size_t resident) {
        auto out = model_.run(tokens, positions, cache_);
        if (trace_ != nullptr) {
            ForwardRecord rec;
            rec.iteration = stats_.forwards;
            rec.cache_len = cache_.size();
            rec.tokens = tokens;
            rec.positions = positions;
            rec.vocab = out.vocab;
            rec.logits = out.logits;
            rec.committed = commit;
            trace_->records.push_back(std::move(rec));
        }
        cache_.append(out.delta, commit);
        last_commit_ = commit;
        for (std::size_t i = 0; i < commit; ++i) record_token(positions[i], tokens[i]);
        ++stats_.forwards;
        stats_.n_fwd += resident;
        stats_.instances += tokens.size();
        stats_.record_commit(commit);
        return out;
    }

    // Tokens finalized without a cache append (the final block-wise block).
    void finalize(Position pos, TokenId token) { record_token(pos, token); }

    double entropy(std::span<const float> row) const { return softmax_entropy(row, cfg_.entropy_temperature); }

    TokenId fill(std::span<const float> row, double entropy) {
        stats_.fill_entropy_sum += entropy;
        ++stats_.fills;
        return sample_token(row, cfg_.temperature, rng_);
    }

    void end_forward(std::vector<WindowSlot> window, std::vector<Position> selected) {
        if (trace_ == nullptr && log_ == nullptr) return;
        ForwardRecord scratch;
        ForwardRecord& rec = trace_ != nullptr ? trace_->records.back() : scratch;
        if (trace_ == nullptr) {
            rec.iteration = stats_.forwards - 1;
            rec.committed = last_commit_;
        }
        rec.window = std::move(window);
        rec.selected = std::move(selected);
        if (log_ != nullptr) write_trace_record(*log_, rec);
    }

    std::optional<Position> eos_position() const { return eos_pos_; }

    DecodeResult finish() {
        DecodeResult result;
        const Position end = eos_pos_ ? *eos_pos_ : last_allowed() + 1;
        for (const auto& [pos, token] : committed_) {
            if (pos < end) result.tokens.push_back(token);
        }
        result.hit_eos = eos_pos_.has_value();
        stats_.n_gen = result.tokens.size() + (result.hit_eos ? 1 : 0);
        stats_.wall_time = std::chrono::duration<double>(Clock::now() - start_).count();
        result.stats = stats_;
        if (trace_ != nullptr) trace_->final_cache = cache_;
        return result;
    }

private:
    void record_token(Position pos, TokenId token) {
        committed_[pos] = token;
        if (token == eos_ && (!eos_pos_ || pos < *eos_pos_)) eos_pos_ = pos;
    }

    const DecoderModel& model_;
    DecodeConfig cfg_;
    DecodeTrace* trace_;
    std::ostream* log_;
    Rng rng_;
    KvCache<float> cache_;
    Position prompt_len_;
    TokenId eos_;
    TokenId mask_;
    DecodeStats stats_;
    std::map<Position, TokenId> committed_;
    std::optional<Position> eos_pos_;
    std::size_t last_commit_ = 0;
    Clock::time_point start_;
};

// Orders slots filled-first via the topological reorder; positions ascend
// within each segment.
std::vector<WindowSlot> reorder_window(std::vector<WindowSlot> slots, TokenId mask_id) {
    std::sort(slots.begin(), slots.end(),
              [](const WindowSlot& a, const WindowSlot& b) { return a.position < b.position; });
    MaskedSequence seq;
    for (const auto& s : slots) {
        const bool masked = s.state == SlotState::kMask;
        seq.tokens.push_back(masked ? mask_id : s.token);
        seq.positions.push_back(s.position);
        seq.mask_flags.push_back(masked);
    }
    const auto reordered = topological_reorder(seq);
    std::vector<WindowSlot> out;
    out.reserve(slots.size());
    for (std::size_t src : reordered.permutation) out.push_back(slots[src]);
    return out;
}

// Fills the selected subset of the masks at batch rows [offset, offset +
// masks.size()). Returns the positions filled.
std::vector<Position> resolve_masks(Session& s, const ForwardOutput<float>& out, std::size_t offset,
                                    std::vector<WindowSlot>& masks) {
    if (masks.empty()) return {};
    std::vector<double> entropies(masks.size()), distances(masks.size());
    for (std::size_t m = 0; m < masks.size(); ++m) {
        entropies[m] = s.entropy(out.row(offset + m));
        distances[m] = s.cfg().distance_mode == DistanceMode::kSlot
                           ? static_cast<double>(m)
                           : static_cast<double>(masks[m].position - masks.front().position);
    }
    const auto chosen = select_by_entropy(entropies, distances, s.cfg().entropy_threshold, s.cfg().distance_penalty);
    std::vector<Position> filled;
    for (std::size_t m : chosen) {
        masks[m].token = s.fill(out.row(offset + m), entropies[m]);
        masks[m].state = SlotState::kFilled;
        filled.push_back(masks[m].position);
    }
    return filled;
}

} // namespace

DecodeResult streaming_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace, std::ostream* log) {
    check_request(model, prompt, cfg);
    Session s(model, prompt, cfg, trace, log);

    Position next = s.first_new();
    std::vector<WindowSlot> window;
    for (int i = 0; i < cfg.window_size && next <= s.last_allowed(); ++i) {
        window.push_back({SlotState::kMask, s.mask(), next++});
    }

    while (!window.empty()) {
        window = reorder_window(std::move(window), s.mask());
        auto split = std::find_if(window.begin(), window.end(),
                                  [](const WindowSlot& w) { return w.state == SlotState::kMask; });
        std::vector<WindowSlot> filled(window.begin(), split);
        std::vector<WindowSlot> masks(split, window.end());

        // A filled EOS ends the sequence once committed: nothing after it
        // is kept, and no new masks are opened.
        std::optional<Position> eos = s.eos_position();
        for (const auto& f : filled) {
            if (f.token == s.eos() && (!eos || f.position < *eos)) eos = f.position;
        }
        if (eos) {
            auto beyond = [&](const WindowSlot& w) { return w.position > *eos; };
            filled.erase(std::remove_if(filled.begin(), filled.end(), beyond), filled.end());
            masks.erase(std::remove_if(masks.begin(), masks.end(), beyond), masks.end());
        }
        const std::size_t resident = filled.size() + masks.size();
        if (resident == 0) break;

        if (!eos) {
            for (std::size_t i = 0; i < filled.size() && next <= s.last_allowed(); ++i) {
                masks.push_back({SlotState::kMask, s.mask(), next++});
            }
        }

        std::vector<TokenId> tokens;
        std::vector<Position> positions;
        for (const auto& w : filled) {
            tokens.push_back(w.token);
            positions.push_back(w.position);
        }
        for (const auto& w : masks) {
            tokens.push_back(s.mask());
            positions.push_back(w.position);
        }
        const auto out = s.forward(tokens, positions, filled.size(), resident);
        const auto selected = resolve_masks(s, out, filled.size(), masks);
        window = std::move(masks);
        s.end_forward(window, selected);
    }
    return s.finish();
}

DecodeResult blockwise_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace, std::ostream* log) {
    check_request(model, prompt, cfg);
    Session s(model, prompt, cfg, trace, log);

    Position next = s.first_new();
    std::vector<WindowSlot> pending;  // completed block, committed by the next forward
    std::vector<WindowSlot> block;
    auto open_block = [&] {
        block.clear();
        for (int i = 0; i < cfg.block_size && next <= s.last_allowed(); ++i) {
            block.push_back({SlotState::kMask, s.mask(), next++});
        }
    };
    open_block();

    while (!block.empty()) {
        block = reorder_window(std::move(block), s.mask());
        const auto split = std::find_if(block.begin(), block.end(),
                                        [](const WindowSlot& w) { return w.state == SlotState::kMask; });
        const auto n_filled = static_cast<std::size_t>(split - block.begin());

        std::vector<TokenId> tokens;
        std::vector<Position> positions;
        for (const auto& w : pending) {
            tokens.push_back(w.token);
            positions.push_back(w.position);
        }
        for (const auto& w : block) {
            tokens.push_back(w.state == SlotState::kFilled ? w.token : s.mask());
            positions.push_back(w.position);
        }
        const auto out = s.forward(tokens, positions, pending.size(), block.size());
        pending.clear();

        std::vector<WindowSlot> masks(block.begin() + static_cast<std::ptrdiff_t>(n_filled), block.end());
        const auto selected = resolve_masks(s, out, tokens.size() - masks.size(), masks);
        std::copy(masks.begin(), masks.end(), block.begin() + static_cast<std::ptrdiff_t>(n_filled));

        const bool complete = std::all_of(block.begin(), block.end(),
                                          [](const WindowSlot& w) { return w.state == SlotState::kFilled; });
        s.end_forward(block, selected);
        if (!complete) continue;

        std::sort(block.begin(), block.end(),
                  [](const WindowSlot& a, const WindowSlot& b) { return a.position < b.position; });
        auto eos = std::find_if(block.begin(), block.end(), [&](const WindowSlot& w) { return w.token == s.eos(); });
        if (eos != block.end()) block.erase(eos + 1, block.end());
        const bool stop = eos != block.end() || next > s.last_allowed();
        if (stop) {
            // The last block is final as soon as it is filled; its K/V is
            // never needed, so no extra forward is spent on it.
            for (const auto& w : block) s.finalize(w.position, w.token);
            break;
        }
        pending = block;
        open_block();
    }
    return s.finish();
}

DecodeResult ar_greedy_decode(const DecoderModel& model, std::span<const TokenId> prompt, const DecodeConfig& cfg,
                              DecodeTrace* trace, std::ostream* log) {
    check_request(model, prompt, cfg);
    Session s(model, prompt, cfg, trace, log);

    std::optional<WindowSlot> previous;
    for (Position pos = s.first_new(); pos <= s.last_allowed(); ++pos) {
        std::vector<TokenId> tokens;
        std::vector<Position> positions;
        if (previous) {
            tokens.push_back(previous->token);
            positions.push_back(previous->position);
        }
        tokens.push_back(s.mask());
        positions.push_back(pos);
        const auto out = s.forward(tokens, positions, previous ? 1 : 0, 1);
        const auto row = out.row(tokens.size() - 1);
        const TokenId token = s.fill(row, s.entropy(row));
        previous = WindowSlot{SlotState::kFilled, token, pos};
        s.end_forward({*previous}, {pos});
        if (token == s.eos()) break;
    }
    if (previous) s.finalize(previous->position, previous->token);
    return s.finish();
}

bool commit_equivalence_check(const Parameters<float>& params, const DecodeTrace& trace, double tolerance) {
    const auto& cache = trace.final_cache;
    if (trace.records.empty()) return true;
    const auto& cfg = params.config();

    // Committed rows against one causal pass over the committed sequence.
    if (!cache.empty()) {
        ForwardBatch full{{cache.tokens().begin(), cache.tokens().end()},
                          {cache.positions().begin(), cache.positions().end()},
                          VisibilitySpec::plain_causal()};
        const auto ref = forward(params, full);
        for (int l = 0; l < cfg.num_layers; ++l) {
            const auto k = cache.keys(l), v = cache.values(l);
            const auto rk = ref.delta.keys(l), rv = ref.delta.values(l);
            if (k.size() != rk.size()) return false;
            for (std::size_t i = 0; i < k.size(); ++i) {
                if (!(std::abs(k[i] - rk[i]) <= tolerance) || !(std::abs(v[i] - rv[i]) <= tolerance)) return false;
            }
        }
    }

    // Each forward against a cache-free pass over [committed prefix; batch].
    for (const auto& rec : trace.records) {
        if (rec.cache_len > cache.size()) return false;
        ForwardBatch full;
        full.tokens.assign(cache.tokens().begin(), cache.tokens().begin() + static_cast<std::ptrdiff_t>(rec.cache_len));
        full.positions.assign(cache.positions().begin(),
                              cache.positions().begin() + static_cast<std::ptrdiff_t>(rec.cache_len));
        full.tokens.insert(full.tokens.end(), rec.tokens.begin(), rec.tokens.end());
        full.positions.insert(full.positions.end(), rec.positions.begin(), rec.positions.end());
        const auto ref = forward(params, full);
        const std::size_t offset = rec.cache_len * ref.vocab;
        if (ref.logits.size() - offset != rec.logits.size()) return false;
        for (std::size_t i = 0; i < rec.logits.size(); ++i) {
            if (!(std::abs(rec.logits[i] - ref.logits[offset + i]) <= tolerance)) return false;
        }
    }
    return true;
}

} // namespace cdlm
