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

// Binary checkpoint layout, all integers little-endian:
//
//   "WDLM"                      magic
//   u32 version                 currently 1
//   u32 config_bytes            length of the config block that follows
//     u32 field_count
//     field_count x { u16 name_len, name, u8 kind (0 = i64, 1 = f64), 8 value bytes }
//   u32 tensor_count
//   tensor_count x { u32 name_len, name, u32 rank, rank x u32 dim, prod(dims) x f32 }

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdlm/model.hpp"

namespace cdlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Parameters<float>& params);
Parameters<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Parameters<float>& params, const std::filesystem::path& path);
/// Throws FormatError on bad magic, unknown version or truncation (the
/// message names the section being read).
Parameters<float> load_checkpoint(const std::filesystem::path& path);

} // namespace cdlm
