#include "vce/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vce {

namespace {

constexpr char kMagic[8] = {'V', 'C', 'E', 'C', 'K', 'P', 'T', '\0'};

template <class U>
void put(std::ostream& out, U v) {
    static_assert(std::endian::native == std::endian::little, "little-endian host required");
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& in) {
    U v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(U));
    return v;
}

}  // namespace

const Tensor<float>& Archive::at(const std::string& name, const Shape& expect) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (it->second.shape() != expect)
        throw std::runtime_error("checkpoint: tensor " + name + " has shape " + shape_str(it->second.shape()) +
                                 ", expected " + shape_str(expect));
    return it->second;
}

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<nn::NamedTensor<float>>& tensors) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    nlohmann::json h = header;
    h["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors) h["tensors"].push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
    const std::string text = h.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.tensor->data()),
                  static_cast<std::streamsize>(t.tensor->size() * sizeof(float)));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = get<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " in " +
                                 path.string());
    const auto len = get<std::uint64_t>(in);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("checkpoint: truncated header in " + path.string());
    Archive a;
    a.header = nlohmann::json::parse(text);
    for (const auto& e : a.header.at("tensors")) {
        Tensor<float> t(e.at("shape").get<Shape>());
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!in) throw std::runtime_error("checkpoint: truncated tensor data in " + path.string());
        a.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    a.header.erase("tensors");
    return a;
}

void restore_state(const Archive& archive, const std::vector<nn::NamedTensor<float>>& state) {
    for (const auto& s : state) *s.tensor = archive.at(s.name, s.tensor->shape());
}

}  // namespace vce
