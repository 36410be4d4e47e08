#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dreamrec/tensor.hpp"

namespace dreamrec::num {

/// On-disk layout (all integers little-endian):
///
///   magic     8 bytes  "DRECCKPT"
///   version   u32      kContainerVersion
///   fingerprint u64    hash of the configuration that produced the file
///   n_meta    u32      then n_meta x { u32 len, key bytes, u32 len, value bytes }
///   n_entries u32      then n_entries x
///                        { u32 len, name bytes, u32 rank, rank x u64 extent,
///                          product(extents) x f32 value (IEEE-754 bits) }
///
/// Metadata is free-form text (run bookkeeping such as step counters); the
/// entries carry all tensors in a fixed order.
inline constexpr std::uint32_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Container {
  std::uint64_t fingerprint = 0;
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<ContainerEntry> entries;

  const ContainerEntry* find(std::string_view name) const;
  const std::string* meta(std::string_view key) const;
  /// Metadata value or FormatError naming the missing key.
  const std::string& require_meta(std::string_view key) const;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for configuration fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);

/// Appends every parameter, in set order, as an entry named after it.
template <typename Real>
void append_parameters(Container& container, const ParameterSet<Real>& params,
                       std::string_view prefix = "");

/// Loads entries named prefix+parameter name into the set. Missing names and
/// shape disagreements raise FormatError naming the parameter.
template <typename Real>
void load_parameters(const Container& container, const ParameterSet<Real>& params,
                     std::string_view prefix = "");

}  // namespace dreamrec::num
