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

#include "cdlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "cdlm/errors.hpp"

namespace cdlm {

namespace {

constexpr char kMagic[4] = {'W', 'D', 'L', 'M'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void le(U value) {
        using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                        std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                           std::conditional_t<sizeof(U) == 2, std::uint16_t,
                                                                              std::uint8_t>>>;
        const auto bits = std::bit_cast<Bits>(value);
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

    void section(std::string name) { section_ = std::move(name); }

    template <typename U>
    U le() {
        need(sizeof(U));
        using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                        std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                           std::conditional_t<sizeof(U) == 2, std::uint16_t,
                                                                              std::uint8_t>>>;
        Bits bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(static_cast<Bits>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return std::bit_cast<U>(bits);
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) {
            throw FormatError("checkpoint truncated in " + section_ + " (offset " + std::to_string(pos_) + ", need " +
                              std::to_string(n) + " more bytes)");
        }
    }

    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
    std::string section_ = "header";
};

struct ConfigField {
    std::uint8_t kind;  // 0 = integer, 1 = real
    std::int64_t integer = 0;
    double real = 0.0;
};

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Parameters<float>& params) {
    const auto& cfg = params.config();
    Writer w;
    w.bytes(kMagic, 4);
    w.le<std::uint32_t>(kCheckpointVersion);

    Writer block;
    const std::pair<const char*, std::int64_t> ints[] = {
        {"num_layers", cfg.num_layers},
        {"num_heads", cfg.num_heads},
        {"head_dim", cfg.head_dim},
        {"vocab_size", cfg.vocab_size},
        {"max_logical_position", cfg.max_logical_position},
        {"mask_token", cfg.mask_id()},
        {"eos_token", cfg.eos_id()},
    };
    block.le<std::uint32_t>(static_cast<std::uint32_t>(std::size(ints) + 1));
    for (const auto& [name, value] : ints) {
        const std::string n = name;
        block.le<std::uint16_t>(static_cast<std::uint16_t>(n.size()));
        block.bytes(n.data(), n.size());
        block.le<std::uint8_t>(0);
        block.le<std::int64_t>(value);
    }
    const std::string rb = "rope_base";
    block.le<std::uint16_t>(static_cast<std::uint16_t>(rb.size()));
    block.bytes(rb.data(), rb.size());
    block.le<std::uint8_t>(1);
    block.le<double>(cfg.rope_base);

    w.le<std::uint32_t>(static_cast<std::uint32_t>(block.data().size()));
    w.bytes(block.data().data(), block.data().size());

    w.le<std::uint32_t>(static_cast<std::uint32_t>(params.tensors().size()));
    for (const auto& t : params.tensors()) {
        w.le<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
        w.bytes(t.name.data(), t.name.size());
        w.le<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
        for (auto dim : t.dims) w.le<std::uint32_t>(static_cast<std::uint32_t>(dim));
        for (float x : t.data) w.le<float>(x);
    }
    return std::move(w.data());
}

Parameters<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    r.section("magic");
    if (r.str(4) != std::string(kMagic, 4)) {
        throw FormatError("not a checkpoint: bad magic");
    }
    r.section("version");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }

    r.section("config block");
    const auto block_len = r.le<std::uint32_t>();
    const std::size_t block_end = r.offset() + block_len;
    const auto count = r.le<std::uint32_t>();
    std::map<std::string, ConfigField> fields;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.le<std::uint16_t>();
        std::string name = r.str(name_len);
        ConfigField f{r.le<std::uint8_t>()};
        if (f.kind == 0) {
            f.integer = r.le<std::int64_t>();
        } else if (f.kind == 1) {
            f.real = r.le<double>();
        } else {
            throw FormatError("config field '" + name + "' has unknown kind " + std::to_string(f.kind));
        }
        fields[name] = f;
    }
    if (r.offset() != block_end) {
        throw FormatError("config block length mismatch");
    }
    auto integer = [&](const char* name) -> int {
        auto it = fields.find(name);
        if (it == fields.end() || it->second.kind != 0) {
            throw FormatError(std::string("config block lacks integer field '") + name + "'");
        }
        return static_cast<int>(it->second.integer);
    };
    ModelConfig cfg;
    cfg.num_layers = integer("num_layers");
    cfg.num_heads = integer("num_heads");
    cfg.head_dim = integer("head_dim");
    cfg.vocab_size = integer("vocab_size");
    cfg.max_logical_position = integer("max_logical_position");
    cfg.mask_token = integer("mask_token");
    cfg.eos_token = integer("eos_token");
    auto rb = fields.find("rope_base");
    if (rb == fields.end() || rb->second.kind != 1) {
        throw FormatError("config block lacks real field 'rope_base'");
    }
    cfg.rope_base = rb->second.real;
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config invalid: ") + e.what());
    }

    Parameters<float> params(cfg);
    r.section("tensor count");
    const auto tensor_count = r.le<std::uint32_t>();
    if (tensor_count != params.tensors().size()) {
        throw FormatError("checkpoint holds " + std::to_string(tensor_count) + " tensors, config implies " +
                          std::to_string(params.tensors().size()));
    }
    for (auto& t : params.mutable_tensors()) {
        r.section("tensor header of '" + t.name + "'");
        const auto name_len = r.le<std::uint32_t>();
        const std::string name = r.str(name_len);
        if (name != t.name) {
            throw FormatError("expected tensor '" + t.name + "', found '" + name + "'");
        }
        const auto rank = r.le<std::uint32_t>();
        if (rank != t.dims.size()) {
            throw FormatError("tensor '" + name + "' has rank " + std::to_string(rank));
        }
        for (auto dim : t.dims) {
            if (r.le<std::uint32_t>() != dim) {
                throw FormatError("tensor '" + name + "' shape does not match the config");
            }
        }
        r.section("tensor data of '" + t.name + "'");
        for (auto& x : t.data) x = r.le<float>();
    }
    if (!r.at_end()) {
        throw FormatError("trailing bytes after the last tensor");
    }
    return params;
}

void save_checkpoint(const Parameters<float>& params, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

Parameters<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

} // namespace cdlm
