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

#include "cdlm/synth.hpp"

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#include "cdlm/errors.hpp"
#include "cdlm/rng.hpp"

namespace cdlm {

namespace {

constexpr std::string_view kAlphabet =
    "0123456789 +=,"
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "!#$%&()*-./:;<>?@[]^{|}";
constexpr char kEosChar = '~';
constexpr char kMaskChar = '_';
constexpr std::string_view kCorpusMagic = "#wedlm-corpus v1 vocab=";

std::string zero_padded(long long value, int width) {
    std::string s = std::to_string(value);
    if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
    return s;
}

std::string counting_text(const CorpusSpec& spec, Rng& rng) {
    long long modulus = 1;
    for (int i = 0; i < spec.digit_width; ++i) modulus *= 10;
    auto n = static_cast<long long>(rng.uniform_int(static_cast<std::uint64_t>(modulus)));
    std::string text;
    while (static_cast<int>(text.size()) < spec.sequence_length) {
        if (!text.empty()) text += ' ';
        text += zero_padded(n, spec.digit_width);
        n = (n + 1) % modulus;
    }
    text.resize(static_cast<std::size_t>(spec.sequence_length));
    return text;
}

std::string arithmetic_text(const CorpusSpec& spec, Rng& rng) {
    std::string text;
    while (static_cast<int>(text.size()) < spec.sequence_length) {
        const auto a = static_cast<long long>(rng.uniform_int(50));
        const auto b = static_cast<long long>(rng.uniform_int(50));
        text += zero_padded(a, 2) + "+" + zero_padded(b, 2) + "=" + zero_padded(a + b, 2) + ",";
    }
    text.resize(static_cast<std::size_t>(spec.sequence_length));
    return text;
}

} // namespace

std::string to_string(CorpusKind kind) {
    switch (kind) {
    case CorpusKind::kCounting: return "counting";
    case CorpusKind::kArithmetic: return "arithmetic";
    case CorpusKind::kRandom: return "random";
    }
    return "unknown";
}

CorpusKind parse_corpus_kind(std::string_view name) {
    if (name == "counting") return CorpusKind::kCounting;
    if (name == "arithmetic") return CorpusKind::kArithmetic;
    if (name == "random") return CorpusKind::kRandom;
    throw ConfigError("unknown corpus kind '" + std::string(name) + "' (counting, arithmetic, random)");
}

void CorpusSpec::validate(int max_logical_position) const {
    if (vocab_size < 4 || vocab_size > Tokenizer::max_vocab_size()) {
        throw ConfigError("corpus vocab_size must lie in [4, " + std::to_string(Tokenizer::max_vocab_size()) + "]");
    }
    if (sequence_length < 1 || sequence_length > max_logical_position) {
        throw ConfigError("corpus sequence_length must lie in [1, " + std::to_string(max_logical_position) + "]");
    }
    if (num_sequences < 0) throw ConfigError("num_sequences must be >= 0");
    switch (kind) {
    case CorpusKind::kCounting:
        if (vocab_size < 13) throw ConfigError("counting corpus needs vocab_size >= 13 (digits and space)");
        if (digit_width < 1 || digit_width > 9) throw ConfigError("digit_width must lie in [1, 9]");
        break;
    case CorpusKind::kArithmetic:
        if (vocab_size < 16) throw ConfigError("arithmetic corpus needs vocab_size >= 16");
        break;
    case CorpusKind::kRandom: break;
    }
}

Tokenizer::Tokenizer(int vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size < 4 || vocab_size > max_vocab_size()) {
        throw ConfigError("tokenizer vocab_size must lie in [4, " + std::to_string(max_vocab_size()) + "]");
    }
}

int Tokenizer::max_vocab_size() { return static_cast<int>(kAlphabet.size()) + 2; }

TokenId Tokenizer::id_of(char c) const {
    if (c == kEosChar) return eos();
    if (c == kMaskChar) return mask();
    const auto at = kAlphabet.find(c);
    if (at == std::string_view::npos || static_cast<int>(at) >= text_symbols()) {
        throw EncodingError(std::string("character '") + c + "' is outside the vocabulary of size " +
                            std::to_string(vocab_size_));
    }
    return static_cast<TokenId>(at);
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(id_of(c));
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string text;
    text.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 0 || id >= vocab_size_) {
            throw EncodingError("token id " + std::to_string(id) + " is outside the vocabulary of size " +
                                std::to_string(vocab_size_));
        }
        if (id == eos()) {
            text += kEosChar;
        } else if (id == mask()) {
            text += kMaskChar;
        } else {
            text += kAlphabet[static_cast<std::size_t>(id)];
        }
    }
    return text;
}

Corpus generate(const CorpusSpec& spec) {
    spec.validate();
    const Tokenizer tok(spec.vocab_size);
    Rng rng(spec.seed);
    Corpus corpus;
    corpus.reserve(static_cast<std::size_t>(spec.num_sequences));
    for (int s = 0; s < spec.num_sequences; ++s) {
        switch (spec.kind) {
        case CorpusKind::kCounting: corpus.push_back(tok.encode(counting_text(spec, rng))); break;
        case CorpusKind::kArithmetic: corpus.push_back(tok.encode(arithmetic_text(spec, rng))); break;
        case CorpusKind::kRandom: {
            std::vector<TokenId> seq(static_cast<std::size_t>(spec.sequence_length));
            for (auto& t : seq) t = static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(tok.text_symbols())));
            corpus.push_back(std::move(seq));
            break;
        }
        }
    }
    return corpus;
}

void write_corpus(std::ostream& out, const Corpus& corpus, int vocab_size) {
    out << kCorpusMagic << vocab_size << '\n';
    for (const auto& seq : corpus) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (i != 0) out << ' ';
            out << seq[i];
        }
        out << '\n';
    }
}

Corpus read_corpus(std::istream& in, int& vocab_size) {
    std::string line;
    if (!std::getline(in, line) || line.rfind(kCorpusMagic, 0) != 0) {
        throw FormatError("corpus header must start with '" + std::string(kCorpusMagic) + "'");
    }
    const std::string_view v = std::string_view(line).substr(kCorpusMagic.size());
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), vocab_size);
    if (ec != std::errc() || ptr != v.data() + v.size() || vocab_size < 4) {
        throw FormatError("corpus header has an invalid vocab size: '" + std::string(v) + "'");
    }
    Corpus corpus;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::vector<TokenId> seq;
        std::string field;
        while (fields >> field) {
            TokenId id = 0;
            auto [p, e] = std::from_chars(field.data(), field.data() + field.size(), id);
            if (e != std::errc() || p != field.data() + field.size() || id < 0 || id >= vocab_size) {
                throw FormatError("corpus line " + std::to_string(line_no) + ": bad token id '" + field + "'");
            }
            seq.push_back(id);
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

} // namespace cdlm
