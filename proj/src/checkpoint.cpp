#include "ehrseq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ehrseq::num {

namespace {

constexpr char kMagic[8] = {'E', 'H', 'R', 'S', 'Q', 'C', 'K', 'P'};

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

const Tensor& Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return t;
    throw std::runtime_error("checkpoint: no parameter block named '" + name + "'");
}

void save_checkpoint(const std::string& path, nlohmann::json header,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
    if (header.contains("params"))
        throw std::runtime_error("save_checkpoint: header already has a 'params' field");
    auto table = nlohmann::json::array();
    for (const auto& [name, t] : params)
        table.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    header["params"] = std::move(table);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    const std::string hbytes = header.dump();
    put_u64(out, hbytes.size());
    out.write(hbytes.data(), std::streamsize(hbytes.size()));
    for (const auto& [name, t] : params) {
        for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
    const std::uint32_t version = get_u32(in);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint version " + std::to_string(version) +
                                 " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
    const std::uint64_t hsize = get_u64(in);
    std::string hbytes(hsize, '\0');
    in.read(hbytes.data(), std::streamsize(hsize));
    if (!in) throw std::runtime_error("truncated checkpoint header in '" + path + "'");

    Checkpoint ckpt;
    ckpt.header = nlohmann::json::parse(hbytes);
    for (const auto& entry : ckpt.header.at("params")) {
        const int rows = entry.at("rows").get<int>();
        const int cols = entry.at("cols").get<int>();
        std::vector<float> values(std::size_t(rows) * cols);
        for (auto& v : values) v = std::bit_cast<float>(get_u32(in));
        if (!in) throw std::runtime_error("truncated parameter block in '" + path + "'");
        ckpt.params.emplace_back(entry.at("name").get<std::string>(),
                                 Tensor::from_values(rows, cols, std::move(values)));
    }
    return ckpt;
}

}  // namespace ehrseq::num
