#include "sqs/autodiff/checkpoint.hpp"

#include "sqs/core/error.hpp"
#include "sqs/io/binary.hpp"

namespace sqs::ad {

namespace {
constexpr char kMagic[8] = {'S', 'Q', 'S', 'C', 'K', 'P', 'T', '1'};
}

std::vector<char> encode_checkpoint(const NamedArrays& records) {
    io::ByteWriter w;
    w.put_bytes(kMagic, sizeof(kMagic));
    w.put<std::uint64_t>(records.size());
    for (const auto& [name, array] : records) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_string(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(array.rank()));
        for (auto d : array.shape()) w.put<std::uint64_t>(d);
        w.put_bytes(array.data(), array.size() * sizeof(double));
    }
    return w.bytes();
}

NamedArrays decode_checkpoint(const std::vector<char>& bytes) {
    io::ByteReader r(bytes);
    const std::string magic = r.get_string(8, "checkpoint magic");
    if (magic != std::string(kMagic, 8)) throw FormatError("not an SQSCKPT1 checkpoint (bad magic)");
    const auto count = r.get<std::uint64_t>("record count");
    NamedArrays out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string rec = "record " + std::to_string(i);
        const auto name_len = r.get<std::uint32_t>(rec + " name length");
        std::string name = r.get_string(name_len, rec + " name");
        const auto rank = r.get<std::uint32_t>("rank of '" + name + "'");
        if (rank > 8) throw FormatError("record '" + name + "' has implausible rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint64_t>("shape of '" + name + "'"));
        const auto n = shape_size(shape);
        if (n > (std::size_t{1} << 34)) throw FormatError("record '" + name + "' is implausibly large");
        std::vector<double> values(n);
        r.get_bytes(values.data(), n * sizeof(double), "values of '" + name + "'");
        out.emplace_back(std::move(name), Array(std::move(shape), std::move(values)));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after " + std::to_string(count) + " checkpoint records");
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedArrays& records) {
    io::write_file(path, encode_checkpoint(records));
}

NamedArrays load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("checkpoint '" + path.string() + "' does not exist");
    return decode_checkpoint(io::read_file(path));
}

const Array& find_record(const NamedArrays& records, const std::string& name) {
    for (const auto& [n, a] : records) {
        if (n == name) return a;
    }
    throw FormatError("checkpoint has no record '" + name + "'");
}

} // namespace sqs::ad
