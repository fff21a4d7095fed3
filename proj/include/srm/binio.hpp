#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace srm::binio {

/// Raised for malformed or truncated containers; the message carries the
/// byte offset where reading failed.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Little-endian byte sink.
class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v)); }
    void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void bytes(const void* p, std::size_t n) {
        auto c = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void magic(const char (&m)[5]) { bytes(m, 4); }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!f) throw std::runtime_error("write to '" + path + "' failed");
    }

private:
    template <typename U>
    void put(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// Little-endian byte source with bounds checks.
class Reader {
public:
    Reader(std::vector<std::uint8_t> data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

    static Reader from_file(const std::string& path) { return Reader(read_file(path), path); }

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(get<std::uint32_t>()); }
    float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void expect_magic(const char (&m)[5]) {
        need(4);
        if (std::memcmp(data_.data() + pos_, m, 4) != 0) {
            fail("bad magic, expected '" + std::string(m, 4) + "'");
        }
        pos_ += 4;
    }
    void expect_version(std::uint32_t version) {
        const auto at = pos_;
        const auto v = u32();
        if (v != version) {
            throw FormatError(source_ + ": unsupported version " + std::to_string(v) + " at offset " +
                              std::to_string(at));
        }
    }
    void expect_end() const {
        if (pos_ != data_.size()) fail(std::to_string(data_.size() - pos_) + " trailing bytes");
    }

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(source_ + ": " + what + " at offset " + std::to_string(pos_));
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            fail("truncated, needed " + std::to_string(n) + " bytes with " + std::to_string(data_.size() - pos_) +
                 " left");
        }
    }

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(data_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::vector<std::uint8_t> data_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace srm::binio
