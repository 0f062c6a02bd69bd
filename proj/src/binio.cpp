// SPDX-License-Identifier: Apache-2.0

#include "copal/binio.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "copal/error.hpp"

namespace copal::binio {

void Writer::bytes(std::span<const std::uint8_t> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

void Writer::magic(std::string_view tag) {
    for (const char c : tag) {
        buf_.push_back(static_cast<std::uint8_t>(c));
    }
}

void Writer::u8(std::uint8_t v) { buf_.push_back(v); }

void Writer::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void Writer::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::f64s(std::span<const double> values) {
    buf_.reserve(buf_.size() + 8 * values.size());
    for (const double v : values) {
        f64(v);
    }
}

void Writer::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    magic(s);
}

void Reader::need(std::size_t n, const char* field) const {
    if (remaining() < n) {
        throw FormatError(std::string("truncated input while reading ") + field);
    }
}

void Reader::expect_magic(std::string_view tag, const char* field) {
    need(tag.size(), field);
    for (const char c : tag) {
        if (buf_[pos_++] != static_cast<std::uint8_t>(c)) {
            throw FormatError(std::string("bad magic in ") + field);
        }
    }
}

std::uint8_t Reader::u8(const char* field) {
    need(1, field);
    return buf_[pos_++];
}

std::uint32_t Reader::u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    }
    return v;
}

std::uint64_t Reader::u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    }
    return v;
}

double Reader::f64(const char* field) { return std::bit_cast<double>(u64(field)); }

std::vector<double> Reader::f64s(std::size_t count, const char* field) {
    if (count > remaining() / 8) {
        throw FormatError(std::string("payload shorter than declared shape in ") + field);
    }
    std::vector<double> out(count);
    for (auto& v : out) {
        v = f64(field);
    }
    return out;
}

std::string Reader::str(const char* field) {
    const std::uint32_t n = u32(field);
    need(n, field);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
}

void Reader::expect_end(const char* what) const {
    if (remaining() != 0) {
        throw FormatError(std::string(what) + ": " + std::to_string(remaining()) + " trailing bytes after payload");
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) {
        throw InputError("short write to " + path.string());
    }
}

}  // namespace copal::binio
