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

#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "build_info.hpp"
#include "cdlm/checkpoint.hpp"
#include "cdlm/errors.hpp"
#include "cdlm/trainmask.hpp"

namespace cdlm::cli {

namespace {

std::ofstream open_output(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

void write_metrics(const RunConfig& cfg, const nlohmann::json& doc) {
    if (cfg.metrics.empty()) return;
    auto out = open_output(cfg.metrics);
    out << doc.dump(2) << '\n';
}

Corpus load_corpus_file(const std::string& path, int& vocab) {
    if (path.empty()) throw ConfigError("no corpus file given (set corpus=<path>)");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus " + path);
    return read_corpus(in, vocab);
}

struct PromptSet {
    std::vector<std::vector<TokenId>> prompts;
    std::vector<std::vector<TokenId>> references;
};

PromptSet load_prompts(const RunConfig& cfg, int model_vocab) {
    int vocab = 0;
    const auto corpus = load_corpus_file(cfg.corpus, vocab);
    if (vocab != model_vocab) {
        throw ConfigError("decoder/checkpoint mismatch: prompt file vocab " + std::to_string(vocab) +
                          " vs checkpoint vocab " + std::to_string(model_vocab));
    }
    if (cfg.prompt_length < 1) throw ConfigError("prompt_length must be >= 1");
    PromptSet set;
    for (const auto& seq : corpus) {
        if (cfg.num_prompts > 0 && static_cast<int>(set.prompts.size()) >= cfg.num_prompts) break;
        const auto p = static_cast<std::size_t>(cfg.prompt_length);
        if (seq.size() < p) continue;
        const auto end = std::min(seq.size(), p + static_cast<std::size_t>(cfg.max_new_tokens));
        set.prompts.emplace_back(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p));
        set.references.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(p),
                                    seq.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (set.prompts.empty()) throw ConfigError("prompt file holds no sequence of length >= prompt_length");
    return set;
}

bool exact_match(const std::vector<TokenId>& generated, const std::vector<TokenId>& reference) {
    return generated.size() >= reference.size() && std::equal(reference.begin(), reference.end(), generated.begin());
}

using DecodeFn = DecodeResult (*)(const DecoderModel&, std::span<const TokenId>, const DecodeConfig&, DecodeTrace*,
                                  std::ostream*);

DecodeFn decoder_for(const std::string& strategy) {
    if (strategy == "streaming") return &streaming_decode;
    if (strategy == "blockwise") return &blockwise_decode;
    if (strategy == "ar") return &ar_greedy_decode;
    throw ConfigError("strategy must be streaming, blockwise or ar (got '" + strategy + "')");
}

nlohmann::json stats_json(const DecodeStats& s) {
    return {{"n_gen", s.n_gen},
            {"n_fwd", s.n_fwd},
            {"forwards", s.forwards},
            {"instances", s.instances},
            {"p_cache", s.n_fwd == 0 ? 0.0 : compute_pcache(s)},
            {"tokens_per_forward", s.tokens_per_forward()},
            {"committed_per_forward", s.committed_per_forward},
            {"mean_fill_entropy", s.mean_fill_entropy()},
            {"wall_time", s.wall_time}};
}

struct Aggregate {
    std::size_t sequences = 0;
    std::size_t exact = 0;
    std::size_t n_gen = 0;
    std::size_t n_fwd = 0;
    std::size_t forwards = 0;
    double wall_time = 0.0;

    void add(const DecodeResult& r, bool match) {
        ++sequences;
        exact += match ? 1 : 0;
        n_gen += r.stats.n_gen;
        n_fwd += r.stats.n_fwd;
        forwards += r.stats.forwards;
        wall_time += r.stats.wall_time;
    }
    double accuracy() const { return sequences == 0 ? 0.0 : static_cast<double>(exact) / sequences; }
    double p_cache() const { return n_fwd == 0 ? 0.0 : static_cast<double>(n_gen) / n_fwd; }
    double tokens_per_forward() const { return forwards == 0 ? 0.0 : static_cast<double>(n_gen) / forwards; }
    nlohmann::json to_json() const {
        return {{"sequences", sequences},           {"accuracy", accuracy()},    {"n_gen", n_gen},
                {"n_fwd", n_fwd},                   {"forwards", forwards},      {"p_cache", p_cache()},
                {"tokens_per_forward", tokens_per_forward()}, {"wall_time", wall_time}};
    }
};

Aggregate run_all(const DecoderModel& model, const PromptSet& prompts, DecodeFn fn, const DecodeConfig& dc) {
    Aggregate agg;
    for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
        const auto r = fn(model, prompts.prompts[i], dc, nullptr, nullptr);
        agg.add(r, exact_match(r.tokens, prompts.references[i]));
    }
    return agg;
}

} // namespace

std::string build_id() { return CDLM_BUILD_ID; }

nlohmann::json metrics_document(const std::string& command, const RunConfig& cfg, nlohmann::json results) {
    return {{"command", command}, {"build", build_id()}, {"config", cfg.to_json()}, {"results", std::move(results)}};
}

nlohmann::json run_gen_corpus(const RunConfig& cfg, std::ostream& out) {
    const auto spec = cfg.corpus_spec();
    const auto corpus = generate(spec);
    const std::string path = !cfg.output.empty() ? cfg.output : cfg.corpus;
    if (path.empty()) {
        write_corpus(out, corpus, spec.vocab_size);
    } else {
        auto file = open_output(path);
        write_corpus(file, corpus, spec.vocab_size);
        out << fmt::format("wrote {} {} sequences to {}\n", corpus.size(), cfg.corpus_kind, path);
    }
    auto doc = metrics_document("gen-corpus", cfg, {{"sequences", corpus.size()}, {"path", path}});
    write_metrics(cfg, doc);
    return doc;
}

nlohmann::json run_train(const RunConfig& cfg, std::ostream& out) {
    const auto mc = cfg.model_config();
    const auto tc = cfg.train_config();
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint path given (set checkpoint=<path>)");
    int vocab = 0;
    const auto corpus = load_corpus_file(cfg.corpus, vocab);
    if (vocab != mc.vocab_size) {
        throw ConfigError("corpus vocab " + std::to_string(vocab) + " does not match vocab_size " +
                          std::to_string(mc.vocab_size));
    }
    // Fail on an unwritable checkpoint before spending the training time.
    { open_output(cfg.checkpoint); }

    std::ofstream log_file;
    if (!cfg.train_log.empty()) {
        log_file = open_output(cfg.train_log);
        log_file << "step,loss,dual,ar,lr,grad_norm\n";
    }
    const auto init = init_params(mc, cfg.init_seed);
    const auto start = std::chrono::steady_clock::now();
    const auto result = train(init, corpus, tc, [&](const StepLog& s) {
        if (log_file.is_open()) {
            log_file << fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6g},{:.6f}\n", s.step, s.loss, s.dual, s.ar, s.lr,
                                    s.grad_norm);
        }
        if (cfg.log_every > 0 && (s.step % cfg.log_every == 0 || s.step + 1 == tc.steps)) {
            out << fmt::format("step {:>6}  loss {:10.4f}  dual {:10.4f}  ar {:8.4f}  lr {:.3g}\n", s.step, s.loss,
                               s.dual, s.ar, s.lr);
        }
    });
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    save_checkpoint(result.params, cfg.checkpoint);

    const Corpus probe(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(64, corpus.size())));
    nlohmann::json results = {{"steps", tc.steps},
                              {"parameters", result.params.parameter_count()},
                              {"wall_time", wall},
                              {"checkpoint", cfg.checkpoint}};
    if (!probe.empty()) {
        results["initial_dual_loss"] = evaluate_dual_loss(init, probe, tc.block_size, cfg.train_seed + 1);
        results["final_dual_loss"] = evaluate_dual_loss(result.params, probe, tc.block_size, cfg.train_seed + 1);
    }
    if (!result.log.empty()) results["final_step_loss"] = result.log.back().loss;
    out << fmt::format("saved {} ({} parameters, {:.1f}s)\n", cfg.checkpoint, result.params.parameter_count(), wall);
    auto doc = metrics_document("train", cfg, results);
    write_metrics(cfg, doc);
    return doc;
}

nlohmann::json run_decode(const RunConfig& cfg, std::ostream& out) {
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint path given (set checkpoint=<path>)");
    const auto params = load_checkpoint(cfg.checkpoint);
    const auto dc = cfg.decode_config();
    const auto fn = decoder_for(cfg.strategy);
    const auto prompts = load_prompts(cfg, params.config().vocab_size);
    const TransformerModel model(params);

    std::optional<Tokenizer> tok;
    if (params.config().vocab_size <= Tokenizer::max_vocab_size()) tok.emplace(params.config().vocab_size);

    std::ofstream gen_file, trace_file;
    if (!cfg.output.empty()) gen_file = open_output(cfg.output);
    if (!cfg.trace_log.empty()) trace_file = open_output(cfg.trace_log);

    Aggregate agg;
    nlohmann::json records = nlohmann::json::array();
    for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
        const auto r = fn(model, prompts.prompts[i], dc, nullptr, trace_file.is_open() ? &trace_file : nullptr);
        const bool match = exact_match(r.tokens, prompts.references[i]);
        agg.add(r, match);
        nlohmann::json rec = {{"index", i}, {"prompt", prompts.prompts[i]}, {"tokens", r.tokens},
                              {"hit_eos", r.hit_eos}, {"exact_match", match}, {"stats", stats_json(r.stats)}};
        if (tok) rec["text"] = tok->decode(r.tokens);
        if (gen_file.is_open()) gen_file << rec.dump() << '\n';
        records.push_back(std::move(rec));
    }
    out << fmt::format("{}: {} prompts, exact match {:.2f}%, tokens/forward {:.3f}, p_cache {:.4f}\n", cfg.strategy,
                       agg.sequences, 100.0 * agg.accuracy(), agg.tokens_per_forward(), agg.p_cache());
    auto doc = metrics_document("decode", cfg, {{"aggregate", agg.to_json()}, {"sequences", records}});
    write_metrics(cfg, doc);
    return doc;
}

nlohmann::json run_bench(const RunConfig& cfg, std::ostream& out) {
    const auto taus = parse_double_list(cfg.sweep_tau);
    const auto lambdas = parse_double_list(cfg.sweep_lambda);
    const auto windows = parse_int_list(cfg.sweep_window);
    const auto blocks = parse_int_list(cfg.sweep_block);
    if (taus.empty() || lambdas.empty() || windows.empty() || blocks.empty()) {
        throw ConfigError("bench sweep grid is empty: sweep_tau, sweep_lambda, sweep_window and sweep_block "
                          "each need at least one value");
    }
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint path given (set checkpoint=<path>)");
    const auto params = load_checkpoint(cfg.checkpoint);
    const auto prompts = load_prompts(cfg, params.config().vocab_size);
    const TransformerModel model(params);
    const auto base = cfg.decode_config();

    const auto ar = run_all(model, prompts, &ar_greedy_decode, base);

    std::ofstream csv;
    if (!cfg.csv.empty()) {
        csv = open_output(cfg.csv);
        csv << "tau,lambda,window,block,stream_accuracy,stream_tokens_per_forward,stream_p_cache,stream_forwards,"
               "stream_n_fwd,block_accuracy,block_tokens_per_forward,block_p_cache,block_forwards,block_n_fwd,"
               "forwards_ratio,n_fwd_ratio\n";
    }
    out << fmt::format("{:>6} {:>6} {:>3} {:>3} | {:>7} {:>6} {:>7} {:>6} | {:>7} {:>6} {:>7} {:>6} | {:>7}\n", "tau",
                       "lambda", "W", "B", "s.acc", "s.tpf", "s.pcache", "s.fwd", "b.acc", "b.tpf", "b.pcache",
                       "b.fwd", "fwd b/s");

    nlohmann::json cells = nlohmann::json::array();
    for (double tau : taus) {
        for (double lambda : lambdas) {
            for (int w : windows) {
                for (int b : blocks) {
                    auto dc = base;
                    dc.entropy_threshold = tau;
                    dc.distance_penalty = lambda;
                    dc.window_size = w;
                    dc.block_size = b;
                    dc.validate();
                    const auto s = run_all(model, prompts, &streaming_decode, dc);
                    const auto k = run_all(model, prompts, &blockwise_decode, dc);
                    const double fwd_ratio = s.forwards == 0 ? 0.0 : static_cast<double>(k.forwards) / s.forwards;
                    const double nfwd_ratio = s.n_fwd == 0 ? 0.0 : static_cast<double>(k.n_fwd) / s.n_fwd;
                    cells.push_back({{"tau", tau},
                                     {"lambda", lambda},
                                     {"window", w},
                                     {"block", b},
                                     {"streaming", s.to_json()},
                                     {"blockwise", k.to_json()},
                                     {"forwards_ratio", fwd_ratio},
                                     {"n_fwd_ratio", nfwd_ratio}});
                    out << fmt::format(
                        "{:>6.3f} {:>6.3f} {:>3} {:>3} | {:>7.3f} {:>6.3f} {:>7.4f} {:>6} | {:>7.3f} {:>6.3f} "
                        "{:>7.4f} {:>6} | {:>7.3f}\n",
                        tau, lambda, w, b, s.accuracy(), s.tokens_per_forward(), s.p_cache(), s.forwards,
                        k.accuracy(), k.tokens_per_forward(), k.p_cache(), k.forwards, fwd_ratio);
                    if (csv.is_open()) {
                        csv << fmt::format("{},{},{},{},{:.6f},{:.6f},{:.6f},{},{},{:.6f},{:.6f},{:.6f},{},{},{:.6f},{:.6f}\n",
                                           tau, lambda, w, b, s.accuracy(), s.tokens_per_forward(), s.p_cache(),
                                           s.forwards, s.n_fwd, k.accuracy(), k.tokens_per_forward(), k.p_cache(),
                                           k.forwards, k.n_fwd, fwd_ratio, nfwd_ratio);
                    }
                }
            }
        }
    }
    out << fmt::format("ar baseline: acc {:.3f}, tokens/forward {:.3f}, p_cache {:.4f}\n", ar.accuracy(),
                       ar.tokens_per_forward(), ar.p_cache());
    auto doc = metrics_document("bench", cfg, {{"cells", cells}, {"ar", ar.to_json()}});
    write_metrics(cfg, doc);
    return doc;
}

std::string mask_dump_text(int length, int block_size, std::uint64_t seed, int vocab_size) {
    if (length < 1 || block_size < 1) throw ConfigError("mask-dump needs dump_length >= 1 and dump_block_size >= 1");
    if (vocab_size < 4) throw ConfigError("mask-dump needs vocab_size >= 4");
    std::vector<TokenId> x0(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i) x0[static_cast<std::size_t>(i)] = i % (vocab_size - 2);
    Rng rng(seed);
    const auto batch =
        build_dual_stream_batch(x0, static_cast<std::size_t>(block_size), rng, static_cast<TokenId>(vocab_size - 1));
    std::ostringstream os;
    write_mask_dump(os, batch, fmt::format("mask-dump L={} B={} seed={}", length, block_size, seed));
    return os.str();
}

void run_mask_dump(const RunConfig& cfg, std::ostream& out) {
    const auto text = mask_dump_text(cfg.dump_length, cfg.dump_block_size, cfg.dump_seed, cfg.vocab_size);
    if (cfg.output.empty()) {
        out << text;
    } else {
        auto file = open_output(cfg.output);
        file << text;
    }
}

} // namespace cdlm::cli
