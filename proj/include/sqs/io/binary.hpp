#pragma once

#include "sqs/core/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

namespace sqs::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// Append-only little-endian byte writer.
class ByteWriter {
public:
    template <typename T>
    void put(T v) {
        static_assert(std::is_arithmetic_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const char*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    void put_string(const std::string& s) { put_bytes(s.data(), s.size()); }
    const std::vector<char>& bytes() const noexcept { return bytes_; }

private:
    std::vector<char> bytes_;
};

// Bounds-checked reader. Every failure names the record being read and the
// byte offset where data ran out.
class ByteReader {
public:
    explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const std::string& what) {
        static_assert(std::is_arithmetic_v<T>);
        T v;
        require(sizeof(T), what);
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string(std::size_t n, const std::string& what) {
        require(n, what);
        std::string s(bytes_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void get_bytes(void* dst, std::size_t n, const std::string& what) {
        require(n, what);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t position() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == bytes_.size(); }

private:
    void require(std::size_t n, const std::string& what) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError("truncated file at byte " + std::to_string(pos_) + " while reading " + what + " (need " +
                              std::to_string(n) + " bytes, have " + std::to_string(bytes_.size() - pos_) + ")");
        }
    }

    const std::vector<char>& bytes_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<char>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace sqs::io
