#include "gspt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "gspt/errors.hpp"

namespace gspt {

namespace {

constexpr const char* kMagic = "gspt-checkpoint 1";

std::filesystem::path data_path(const std::filesystem::path& manifest) {
    auto p = manifest;
    p += ".bin";
    return p;
}

std::string dims_string(const ad::Shape& shape) {
    if (shape.empty()) return "scalar";
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += 'x';
        s += std::to_string(shape[i]);
    }
    return s;
}

ad::Shape parse_dims(const std::string& s) {
    ad::Shape shape;
    if (s == "scalar") return shape;
    std::istringstream in(s);
    std::string part;
    while (std::getline(in, part, 'x')) {
        try {
            shape.push_back(std::stoul(part));
        } catch (const std::exception&) {
            throw CheckpointError("bad shape \"" + s + "\" in manifest");
        }
    }
    return shape;
}

} // namespace

const std::vector<double>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, data] : records)
        if (n == name) return &data;
    return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream manifest(path);
    std::ofstream bin(data_path(path), std::ios::binary);
    if (!manifest || !bin) throw CheckpointError("cannot write checkpoint " + path.string());

    manifest << kMagic << '\n';
    manifest << "data " << data_path(path).filename().string() << '\n';
    for (const auto& [k, v] : ckpt.meta) {
        if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw CheckpointError("checkpoint meta key/value contains whitespace: " + k);
        manifest << "meta " << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < ckpt.records.size(); ++i) {
        const auto& [name, data] = ckpt.records[i];
        if (ad::numel(ckpt.shapes[i]) != data.size()) throw CheckpointError("record " + name + " has wrong length");
        manifest << "tensor " << name << ' ' << dims_string(ckpt.shapes[i]) << ' ' << offset << '\n';
        for (double v : data) detail::write_le(bin, v);
        offset += data.size() * sizeof(double);
    }
    if (!manifest || !bin) throw CheckpointError("write failed for checkpoint " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                      const std::map<std::string, std::string>& meta) {
    Checkpoint ckpt;
    ckpt.meta = meta;
    for (const auto& t : tensors) {
        ckpt.records.emplace_back(t.name, std::vector<double>(t.tensor.data().begin(), t.tensor.data().end()));
        ckpt.shapes.push_back(t.tensor.shape());
    }
    write_checkpoint(path, ckpt);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream manifest(path);
    if (!manifest) throw CheckpointError("cannot open checkpoint manifest " + path.string());
    std::string line;
    if (!std::getline(manifest, line) || line != kMagic)
        throw CheckpointError(path.string() + " is not a checkpoint manifest");

    std::filesystem::path bin_path = data_path(path);
    struct Entry {
        std::string name;
        ad::Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    Checkpoint ckpt;
    std::size_t line_no = 1;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "data") {
            std::string file;
            ls >> file;
            bin_path = path.parent_path() / file;
        } else if (kind == "meta") {
            std::string key, value;
            ls >> key;
            std::getline(ls >> std::ws, value);
            ckpt.meta[key] = value;
        } else if (kind == "tensor") {
            Entry e;
            std::string dims;
            if (!(ls >> e.name >> dims >> e.offset))
                throw CheckpointError(path.string() + ":" + std::to_string(line_no) + ": malformed tensor line");
            e.shape = parse_dims(dims);
            entries.push_back(std::move(e));
        } else {
            throw CheckpointError(path.string() + ":" + std::to_string(line_no) + ": unknown entry \"" + kind + "\"");
        }
    }

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw CheckpointError("cannot open checkpoint data " + bin_path.string());
    for (const auto& e : entries) {
        bin.seekg(static_cast<std::streamoff>(e.offset));
        std::vector<double> data(ad::numel(e.shape));
        for (double& v : data)
            if (!detail::read_le(bin, v)) throw CheckpointError("checkpoint data truncated in record " + e.name);
        ckpt.records.emplace_back(e.name, std::move(data));
        ckpt.shapes.push_back(e.shape);
    }
    return ckpt;
}

void load_into(const Checkpoint& ckpt, std::vector<NamedTensor>& tensors) {
    for (auto& t : tensors) {
        std::size_t idx = ckpt.records.size();
        for (std::size_t i = 0; i < ckpt.records.size(); ++i)
            if (ckpt.records[i].first == t.name) idx = i;
        if (idx == ckpt.records.size()) throw CheckpointError("checkpoint is missing tensor " + t.name);
        if (ckpt.shapes[idx] != t.tensor.shape())
            throw CheckpointError("checkpoint tensor " + t.name + " has shape " + ad::shape_string(ckpt.shapes[idx]) +
                                  ", model expects " + ad::shape_string(t.tensor.shape()));
        const auto& src = ckpt.records[idx].second;
        auto dst = t.tensor.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

} // namespace gspt
