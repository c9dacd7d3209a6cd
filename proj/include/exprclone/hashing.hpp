#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace exprclone {

/// Incremental 64-bit FNV-1a. Used for content keys and digests, not for security.
class Fnv1a {
public:
    Fnv1a& update(std::span<const std::byte> bytes);
    Fnv1a& update(std::string_view text);

    template <typename T>
    Fnv1a& update_pod(const T& value)
    {
        return update(std::as_bytes(std::span<const T, 1>(&value, 1)));
    }

    template <typename T>
    Fnv1a& update_array(const T* data, std::size_t count)
    {
        return update(std::as_bytes(std::span<const T>(data, count)));
    }

    std::uint64_t value() const { return m_state; }
    std::string hex() const;

private:
    std::uint64_t m_state = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t value);

} // namespace exprclone
