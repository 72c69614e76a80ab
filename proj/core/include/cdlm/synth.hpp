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

// Synthetic corpora with controlled continuation entropy, and the
// character-level tokenizer they are written in.
//
// Ids below vocab-2 are text symbols; vocab-2 is EOS and vocab-1 the mask.
// The text alphabet always starts with "0123456789 +=," so digit-based
// corpora work for any vocabulary that holds those symbols.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdlm/model.hpp"

namespace cdlm {

enum class CorpusKind {
    kCounting,    // "07 08 09 10 ..." — deterministic after the first number
    kArithmetic,  // "12+30=42,..."   — operands random, sums determined
    kRandom,      // i.i.d. uniform text symbols
};

std::string to_string(CorpusKind kind);
/// Throws ConfigError for unknown names.
CorpusKind parse_corpus_kind(std::string_view name);

struct CorpusSpec {
    CorpusKind kind = CorpusKind::kCounting;
    int vocab_size = 32;
    int sequence_length = 32;
    int num_sequences = 256;
    std::uint64_t seed = 0;
    int digit_width = 2;  // counting only

    /// Throws ConfigError.
    void validate(int max_logical_position = 256) const;
};

class Tokenizer {
public:
    explicit Tokenizer(int vocab_size);

    int vocab_size() const { return vocab_size_; }
    int text_symbols() const { return vocab_size_ - 2; }
    TokenId eos() const { return vocab_size_ - 2; }
    TokenId mask() const { return vocab_size_ - 1; }
    TokenId id_of(char c) const;  // EncodingError when c is not in the vocabulary

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    /// Largest vocabulary the alphabet supports.
    static int max_vocab_size();

private:
    int vocab_size_;
};

using Corpus = std::vector<std::vector<TokenId>>;

Corpus generate(const CorpusSpec& spec);

void write_corpus(std::ostream& out, const Corpus& corpus, int vocab_size);
/// Returns the sequences; `vocab_size` receives the header's vocabulary.
/// Throws FormatError on a bad header or out-of-range ids.
Corpus read_corpus(std::istream& in, int& vocab_size);

} // namespace cdlm
