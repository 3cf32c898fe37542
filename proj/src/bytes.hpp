#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace mseg::bytes {

template <typename T>
T to_little(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

class Writer {
public:
    template <typename T>
    void put(T v)
    {
        v = to_little(v);
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }

    void put_raw(const void* data, std::size_t n)
    {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }

    void put_string(const std::string& s)
    {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_raw(s.data(), s.size());
    }

    std::vector<std::uint8_t>& buffer() { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; `what` prefixes truncation errors.
template <typename Error>
class Reader {
public:
    Reader(const std::vector<std::uint8_t>& buf, std::string what)
        : buf_(buf)
        , what_(std::move(what))
    {
    }

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return to_little(v);
    }

    std::string get_string(std::size_t max_len = 4096)
    {
        const auto n = get<std::uint32_t>();
        if (n > max_len) {
            throw Error(what_ + ": string length " + std::to_string(n) + " exceeds limit");
        }
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    void need(std::size_t n) const
    {
        if (n > buf_.size() - pos_) {
            throw Error(what_ + ": truncated data");
        }
    }

    std::size_t remaining() const { return buf_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    const std::vector<std::uint8_t>& buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace mseg::bytes
