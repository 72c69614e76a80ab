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

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdlm/decode.hpp"
#include "cdlm/model.hpp"
#include "cdlm/synth.hpp"
#include "cdlm/train.hpp"

namespace cdlm::cli {

// Every setting any command reads. Keys match the field names below, and
// each key is also a `--key` flag.
struct RunConfig {
    // model
    int num_layers = 2;
    int num_heads = 4;
    int head_dim = 16;
    int vocab_size = 32;
    int max_logical_position = 256;
    double rope_base = 10000.0;
    std::uint64_t init_seed = 0;

    // corpus
    std::string corpus_kind = "counting";
    int sequence_length = 32;
    int num_sequences = 512;
    std::uint64_t corpus_seed = 0;
    int digit_width = 2;

    // training
    int steps = 2000;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    bool cosine_decay = false;
    int warmup_steps = 0;
    double grad_clip = 1.0;
    int train_block_size = 8;
    double ar_alpha = 0.1;
    std::uint64_t train_seed = 0;
    int log_every = 100;

    // decoding
    std::string strategy = "streaming";
    int window_size = 6;
    double entropy_threshold = 0.5;
    double distance_penalty = 0.10;
    double temperature = 0.0;
    int max_new_tokens = 24;
    std::uint64_t decode_seed = 0;
    int block_size = 32;
    double entropy_temperature = 1.0;
    std::string distance_mode = "slot";
    int prompt_length = 8;
    int num_prompts = 0;  // 0 = every sequence of the prompt file

    // bench sweep grids (comma-separated)
    std::string sweep_tau = "0.5";
    std::string sweep_lambda = "0.1";
    std::string sweep_window = "6";
    std::string sweep_block = "6";

    // mask dump
    int dump_length = 4;
    int dump_block_size = 2;
    std::uint64_t dump_seed = 0;

    // paths
    std::string corpus;      // corpus file read by train/decode/bench
    std::string checkpoint;  // written by train, read by decode/bench
    std::string output;      // command-specific primary output
    std::string metrics;     // JSON metrics document
    std::string csv;         // bench CSV
    std::string train_log;   // per-step CSV
    std::string trace_log;   // decode JSON-lines trace

    ModelConfig model_config() const;
    CorpusSpec corpus_spec() const;
    TrainConfig train_config() const;
    DecodeConfig decode_config() const;

    /// Throws ConfigError for unknown keys or unparsable values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    /// Applies "key=value" lines; '#' starts a comment.
    void load(std::istream& in, const std::string& source = "config");
    void load_file(const std::string& path);

    nlohmann::json to_json() const;
};

struct FieldInfo {
    std::string key;
    std::string help;
};

const std::vector<FieldInfo>& run_config_fields();

std::vector<double> parse_double_list(std::string_view text);
std::vector<int> parse_int_list(std::string_view text);

} // namespace cdlm::cli
