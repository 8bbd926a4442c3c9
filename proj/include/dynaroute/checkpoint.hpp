// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "dynaroute/tensor.hpp"

namespace dynaroute {

/// DWT1 parameter file: the magic "DWT1" followed, until end of file, by one
/// record per parameter:
///   u32 name length | UTF-8 name | u32 rank | rank x u64 dims | f32 payload
/// All integers and floats are little-endian.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedParam> params);

std::vector<NamedParam> load_checkpoint(const std::filesystem::path& path);

/// Copies values from a checkpoint into existing parameters; names and shapes
/// must match exactly, in any order.
void load_checkpoint_into(const std::filesystem::path& path, std::span<NamedParam> params);

}  // namespace dynaroute
