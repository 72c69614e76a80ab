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

// The cdlm subcommands. Each returns its metrics document (also written to
// `metrics` when set) and prints a human summary to `out`.

#pragma once

#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "run_config.hpp"

namespace cdlm::cli {

std::string build_id();

/// {"command", "build", "config", "results"}
nlohmann::json metrics_document(const std::string& command, const RunConfig& cfg, nlohmann::json results);

nlohmann::json run_gen_corpus(const RunConfig& cfg, std::ostream& out);
nlohmann::json run_train(const RunConfig& cfg, std::ostream& out);
nlohmann::json run_decode(const RunConfig& cfg, std::ostream& out);
nlohmann::json run_bench(const RunConfig& cfg, std::ostream& out);
/// Writes the dump to `output` when set, else to `out`.
void run_mask_dump(const RunConfig& cfg, std::ostream& out);

/// The mask-dump batch: x0[i] = i mod (vocab - 2), masks from `seed`.
std::string mask_dump_text(int length, int block_size, std::uint64_t seed, int vocab_size = 32);

} // namespace cdlm::cli
