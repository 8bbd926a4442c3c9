// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>

#include "binary_io.hpp"
#include "dynaroute/errors.hpp"

namespace dynaroute {
namespace {
constexpr char kMagic[4] = {'D', 'W', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedParam> params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  for (const auto& p : params) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.tensor.shape();
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    const auto values = p.tensor.data();
    os.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size() * sizeof(float)));
  }
  if (!os) throw DataError(DataError::Kind::kIo, "write failed for " + path.string());
}

std::vector<NamedParam> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw DataError(DataError::Kind::kBadMagic, path.string() + ": not a DWT1 checkpoint");
  }
  std::vector<NamedParam> params;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = detail::read_le<std::uint32_t>(is, "parameter name length");
    std::string name(name_len, '\0');
    detail::read_bytes(is, name.data(), name_len, "parameter name");
    const auto rank = detail::read_le<std::uint32_t>(is, "rank of " + name);
    if (rank > kMaxRank) {
      throw DataError(DataError::Kind::kDimOverflow, name + ": rank " + std::to_string(rank));
    }
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = detail::read_le<std::uint64_t>(is, "dims of " + name);
      if (d != 0 && count > std::numeric_limits<std::uint32_t>::max() / d) {
        throw DataError(DataError::Kind::kDimOverflow, name + ": element count overflows");
      }
      count *= d;
      shape.push_back(static_cast<std::int64_t>(d));
    }
    std::vector<float> values(count);
    detail::read_bytes(is, reinterpret_cast<char*>(values.data()), count * sizeof(float),
                       "payload of " + name);
    params.push_back(NamedParam{std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return params;
}

void load_checkpoint_into(const std::filesystem::path& path, std::span<NamedParam> params) {
  auto loaded = load_checkpoint(path);
  std::map<std::string, Tensor> by_name;
  for (auto& p : loaded) by_name.emplace(p.name, p.tensor);
  if (by_name.size() != params.size()) {
    throw DataError(DataError::Kind::kInvalid,
                    path.string() + ": holds " + std::to_string(by_name.size()) +
                        " parameters, model expects " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw DataError(DataError::Kind::kInvalid, path.string() + ": missing parameter " + p.name);
    }
    if (it->second.shape() != p.tensor.shape()) {
      throw DataError(DataError::Kind::kInvalid,
                      path.string() + ": parameter " + p.name + " has shape " +
                          shape_str(it->second.shape()) + ", expected " +
                          shape_str(p.tensor.shape()));
    }
    std::ranges::copy(it->second.data(), p.tensor.data().begin());
  }
}

}  // namespace dynaroute
