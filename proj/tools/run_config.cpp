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

#include "run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>

#include "cdlm/errors.hpp"

namespace cdlm::cli {

namespace {

using Member = std::variant<int RunConfig::*, double RunConfig::*, std::uint64_t RunConfig::*, bool RunConfig::*,
                            std::string RunConfig::*>;

struct Field {
    const char* key;
    Member member;
    const char* help;
};

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        {"num_layers", &RunConfig::num_layers, "transformer layers"},
        {"num_heads", &RunConfig::num_heads, "attention heads"},
        {"head_dim", &RunConfig::head_dim, "per-head width (even)"},
        {"vocab_size", &RunConfig::vocab_size, "vocabulary incl. EOS and mask"},
        {"max_logical_position", &RunConfig::max_logical_position, "largest logical position id"},
        {"rope_base", &RunConfig::rope_base, "rotary frequency base"},
        {"init_seed", &RunConfig::init_seed, "parameter init seed"},
        {"corpus_kind", &RunConfig::corpus_kind, "counting | arithmetic | random"},
        {"sequence_length", &RunConfig::sequence_length, "tokens per corpus sequence"},
        {"num_sequences", &RunConfig::num_sequences, "sequences to generate"},
        {"corpus_seed", &RunConfig::corpus_seed, "corpus generation seed"},
        {"digit_width", &RunConfig::digit_width, "digits per counting number"},
        {"steps", &RunConfig::steps, "optimizer steps"},
        {"batch_size", &RunConfig::batch_size, "sequences per step"},
        {"learning_rate", &RunConfig::learning_rate, "AdamW learning rate"},
        {"weight_decay", &RunConfig::weight_decay, "decoupled weight decay"},
        {"cosine_decay", &RunConfig::cosine_decay, "cosine learning-rate decay"},
        {"warmup_steps", &RunConfig::warmup_steps, "linear warmup steps"},
        {"grad_clip", &RunConfig::grad_clip, "global gradient-norm clip (<= 0 disables)"},
        {"train_block_size", &RunConfig::train_block_size, "block size of the dual-stream objective"},
        {"ar_alpha", &RunConfig::ar_alpha, "weight of the auxiliary next-token loss"},
        {"train_seed", &RunConfig::train_seed, "training seed"},
        {"log_every", &RunConfig::log_every, "print the loss every N steps (0 = quiet)"},
        {"strategy", &RunConfig::strategy, "streaming | blockwise | ar"},
        {"window_size", &RunConfig::window_size, "streaming window W"},
        {"entropy_threshold", &RunConfig::entropy_threshold, "acceptance threshold tau"},
        {"distance_penalty", &RunConfig::distance_penalty, "distance penalty lambda"},
        {"temperature", &RunConfig::temperature, "sampling temperature (0 = argmax)"},
        {"max_new_tokens", &RunConfig::max_new_tokens, "tokens to generate per prompt"},
        {"decode_seed", &RunConfig::decode_seed, "sampling seed"},
        {"block_size", &RunConfig::block_size, "block-wise decoding block size"},
        {"entropy_temperature", &RunConfig::entropy_temperature, "temperature used for selection entropy"},
        {"distance_mode", &RunConfig::distance_mode, "slot | logical"},
        {"prompt_length", &RunConfig::prompt_length, "prompt prefix taken from each sequence"},
        {"num_prompts", &RunConfig::num_prompts, "prompts to decode (0 = all)"},
        {"sweep_tau", &RunConfig::sweep_tau, "bench grid for tau"},
        {"sweep_lambda", &RunConfig::sweep_lambda, "bench grid for lambda"},
        {"sweep_window", &RunConfig::sweep_window, "bench grid for W"},
        {"sweep_block", &RunConfig::sweep_block, "bench grid for B"},
        {"dump_length", &RunConfig::dump_length, "mask-dump sequence length"},
        {"dump_block_size", &RunConfig::dump_block_size, "mask-dump block size"},
        {"dump_seed", &RunConfig::dump_seed, "mask-dump seed"},
        {"corpus", &RunConfig::corpus, "corpus file"},
        {"checkpoint", &RunConfig::checkpoint, "checkpoint file"},
        {"output", &RunConfig::output, "primary output file"},
        {"metrics", &RunConfig::metrics, "JSON metrics file"},
        {"csv", &RunConfig::csv, "bench CSV file"},
        {"train_log", &RunConfig::train_log, "per-step training CSV"},
        {"trace_log", &RunConfig::trace_log, "decode trace (JSON lines)"},
    };
    return table;
}

const Field& find_field(std::string_view key) {
    for (const auto& f : fields()) {
        if (key == f.key) return f;
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_integer(std::string_view key, std::string_view value) {
    Int out{};
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || p != value.data() + value.size()) {
        throw ConfigError("key '" + std::string(key) + "' expects an integer, got '" + std::string(value) + "'");
    }
    return out;
}

double parse_real(std::string_view key, std::string_view value) {
    const std::string s(value);
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size()) {
        throw ConfigError("key '" + std::string(key) + "' expects a number, got '" + s + "'");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("key '" + std::string(key) + "' expects a boolean, got '" + std::string(value) + "'");
}

std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

const std::vector<FieldInfo>& run_config_fields() {
    static const std::vector<FieldInfo> infos = [] {
        std::vector<FieldInfo> out;
        for (const auto& f : fields()) out.push_back({f.key, f.help});
        return out;
    }();
    return infos;
}

void RunConfig::set(std::string_view key, std::string_view raw) {
    const auto& f = find_field(key);
    const auto value = trim(raw);
    std::visit(
        [&](auto member) {
            using V = std::remove_reference_t<decltype(this->*member)>;
            if constexpr (std::is_same_v<V, int> || std::is_same_v<V, std::uint64_t>) {
                this->*member = parse_integer<V>(key, value);
            } else if constexpr (std::is_same_v<V, double>) {
                this->*member = parse_real(key, value);
            } else if constexpr (std::is_same_v<V, bool>) {
                this->*member = parse_bool(key, value);
            } else {
                this->*member = std::string(value);
            }
        },
        f.member);
}

std::string RunConfig::get(std::string_view key) const {
    const auto& f = find_field(key);
    return std::visit(
        [&](auto member) -> std::string {
            using V = std::remove_cvref_t<decltype(this->*member)>;
            if constexpr (std::is_same_v<V, int> || std::is_same_v<V, std::uint64_t>) {
                return std::to_string(this->*member);
            } else if constexpr (std::is_same_v<V, double>) {
                return format_real(this->*member);
            } else if constexpr (std::is_same_v<V, bool>) {
                return this->*member ? "true" : "false";
            } else {
                return this->*member;
            }
        },
        f.member);
}

void RunConfig::load(std::istream& in, const std::string& source) {
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view(line);
        if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
        view = trim(view);
        if (view.empty()) continue;
        const auto eq = view.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
        }
        try {
            set(trim(view.substr(0, eq)), view.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    load(in, path);
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : fields()) {
        std::visit([&](auto member) { j[f.key] = this->*member; }, f.member);
    }
    return j;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig c;
    c.num_layers = num_layers;
    c.num_heads = num_heads;
    c.head_dim = head_dim;
    c.vocab_size = vocab_size;
    c.max_logical_position = max_logical_position;
    c.rope_base = rope_base;
    c.validate();
    return c;
}

CorpusSpec RunConfig::corpus_spec() const {
    CorpusSpec s;
    s.kind = parse_corpus_kind(corpus_kind);
    s.vocab_size = vocab_size;
    s.sequence_length = sequence_length;
    s.num_sequences = num_sequences;
    s.seed = corpus_seed;
    s.digit_width = digit_width;
    s.validate(max_logical_position);
    return s;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.weight_decay = weight_decay;
    t.cosine_decay = cosine_decay;
    t.warmup_steps = warmup_steps;
    t.grad_clip = grad_clip;
    t.block_size = train_block_size;
    t.ar_alpha = ar_alpha;
    t.seed = train_seed;
    t.validate();
    return t;
}

DecodeConfig RunConfig::decode_config() const {
    DecodeConfig d;
    d.window_size = window_size;
    d.entropy_threshold = entropy_threshold;
    d.distance_penalty = distance_penalty;
    d.temperature = temperature;
    d.max_new_tokens = max_new_tokens;
    d.seed = decode_seed;
    d.block_size = block_size;
    d.entropy_temperature = entropy_temperature;
    if (distance_mode == "slot") {
        d.distance_mode = DistanceMode::kSlot;
    } else if (distance_mode == "logical") {
        d.distance_mode = DistanceMode::kLogical;
    } else {
        throw ConfigError("distance_mode must be 'slot' or 'logical'");
    }
    d.validate();
    return d;
}

std::vector<double> parse_double_list(std::string_view text) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto item = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (!item.empty()) out.push_back(parse_real("sweep", item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<int> parse_int_list(std::string_view text) {
    std::vector<int> out;
    for (double v : parse_double_list(text)) {
        if (v != static_cast<int>(v)) throw ConfigError("sweep expects integers");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

} // namespace cdlm::cli
