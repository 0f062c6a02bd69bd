// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary encoding helpers for the checkpoint, importance
// state and mask containers.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace copal::binio {

class Writer {
public:
    void bytes(std::span<const std::uint8_t> data);
    void magic(std::string_view tag);
    void u8(std::uint8_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void f64s(std::span<const double> values);
    /// u32 length prefix followed by the raw characters.
    void str(std::string_view s);

    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; every short read throws FormatError naming `field`.
class Reader {
public:
    explicit Reader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

    void expect_magic(std::string_view tag, const char* field);
    std::uint8_t u8(const char* field);
    std::uint32_t u32(const char* field);
    std::uint64_t u64(const char* field);
    double f64(const char* field);
    std::vector<double> f64s(std::size_t count, const char* field);
    std::string str(const char* field);

    std::size_t remaining() const noexcept { return buf_.size() - pos_; }
    void expect_end(const char* what) const;

private:
    void need(std::size_t n, const char* field) const;

    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);

}  // namespace copal::binio
