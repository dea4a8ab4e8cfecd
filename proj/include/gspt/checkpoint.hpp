#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gspt/autodiff.hpp"

namespace gspt {

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
};

/// Flat little-endian float64 records plus a text manifest. The manifest lives at
/// `path` and lists one `tensor <name> <d0>x<d1>... <byte offset>` line per record;
/// the data file is `path` with ".bin" appended. `meta` entries are stored as
/// `meta <key> <value>` lines.
struct Checkpoint {
    std::vector<std::pair<std::string, std::vector<double>>> records;
    std::vector<ad::Shape> shapes;
    std::map<std::string, std::string> meta;

    const std::vector<double>* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                      const std::map<std::string, std::string>& meta = {});

/// Appends raw records (optimizer moments, ...) alongside the tensors.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies records into `tensors` by name; every tensor must be present with a
/// matching shape.
void load_into(const Checkpoint& ckpt, std::vector<NamedTensor>& tensors);

} // namespace gspt
