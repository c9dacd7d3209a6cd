#include <exprclone/hashing.hpp>

#include <cstdio>

namespace exprclone {

Fnv1a& Fnv1a::update(std::span<const std::byte> bytes)
{
    for (std::byte b : bytes) {
        m_state ^= static_cast<std::uint64_t>(b);
        m_state *= 0x100000001b3ULL;
    }
    return *this;
}

Fnv1a& Fnv1a::update(std::string_view text)
{
    return update(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string Fnv1a::hex() const
{
    return to_hex(m_state);
}

std::string to_hex(std::uint64_t value)
{
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

} // namespace exprclone
