#include <exprclone/array_store.hpp>
#include <exprclone/error.hpp>

#include <cstring>
#include <fstream>
#include <iterator>

namespace exprclone {

namespace {

constexpr char k_magic[4] = {'E', 'X', 'N', 'A'};
constexpr std::uint32_t k_version = 1;

template <typename T>
void append_pod(std::vector<std::byte>& out, const T& v)
{
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    Reader(const std::vector<std::byte>& bytes, const std::string& origin)
        : m_bytes(bytes)
        , m_origin(origin)
    {}

    template <typename T>
    T pod()
    {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }

    const std::byte* take(std::size_t n)
    {
        if (m_pos + n > m_bytes.size()) {
            throw Error("array store '" + m_origin + "' is truncated");
        }
        const std::byte* p = m_bytes.data() + m_pos;
        m_pos += n;
        return p;
    }

    bool done() const { return m_pos == m_bytes.size(); }

private:
    const std::vector<std::byte>& m_bytes;
    std::string m_origin;
    std::size_t m_pos = 0;
};

std::size_t element_size(ArrayStore::DType t)
{
    switch (t) {
    case ArrayStore::DType::f64: return 8;
    case ArrayStore::DType::i64: return 8;
    case ArrayStore::DType::u8: return 1;
    }
    throw Error("unknown dtype");
}

std::uint64_t element_count(const std::vector<std::uint64_t>& shape)
{
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

} // namespace

void ArrayStore::put(const std::string& name, const Eigen::MatrixXd& m)
{
    // Row-major on disk regardless of Eigen storage order.
    Entry e;
    e.dtype = DType::f64;
    e.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    e.data.resize(static_cast<std::size_t>(m.size()) * 8);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    if (rm.size() > 0) std::memcpy(e.data.data(), rm.data(), e.data.size());
    m_entries[name] = std::move(e);
}

void ArrayStore::put(const std::string& name, const Eigen::VectorXd& v)
{
    Entry e;
    e.dtype = DType::f64;
    e.shape = {static_cast<std::uint64_t>(v.size())};
    e.data.resize(static_cast<std::size_t>(v.size()) * 8);
    if (v.size() > 0) std::memcpy(e.data.data(), v.data(), e.data.size());
    m_entries[name] = std::move(e);
}

void ArrayStore::put(const std::string& name, const std::vector<std::int64_t>& v)
{
    Entry e;
    e.dtype = DType::i64;
    e.shape = {static_cast<std::uint64_t>(v.size())};
    e.data.resize(v.size() * 8);
    if (!v.empty()) std::memcpy(e.data.data(), v.data(), e.data.size());
    m_entries[name] = std::move(e);
}

void ArrayStore::put_text(const std::string& name, const std::string& text)
{
    Entry e;
    e.dtype = DType::u8;
    e.shape = {static_cast<std::uint64_t>(text.size())};
    e.data.resize(text.size());
    if (!text.empty()) std::memcpy(e.data.data(), text.data(), text.size());
    m_entries[name] = std::move(e);
}

const ArrayStore::Entry& ArrayStore::at(const std::string& name) const
{
    auto it = m_entries.find(name);
    if (it == m_entries.end()) {
        throw Error("array store has no entry '" + name + "'");
    }
    return it->second;
}

Eigen::MatrixXd ArrayStore::matrix(const std::string& name) const
{
    const Entry& e = at(name);
    if (e.dtype != DType::f64 || e.shape.size() > 2) {
        throw Error("entry '" + name + "' is not a real matrix");
    }
    const auto rows = static_cast<Eigen::Index>(e.shape.empty() ? 1 : e.shape[0]);
    const auto cols = static_cast<Eigen::Index>(e.shape.size() == 2 ? e.shape[1] : 1);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    if (rm.size() > 0) std::memcpy(rm.data(), e.data.data(), e.data.size());
    return rm;
}

Eigen::VectorXd ArrayStore::vector(const std::string& name) const
{
    const Entry& e = at(name);
    if (e.dtype != DType::f64) {
        throw Error("entry '" + name + "' is not a real array");
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(element_count(e.shape)));
    if (v.size() > 0) std::memcpy(v.data(), e.data.data(), e.data.size());
    return v;
}

std::vector<std::int64_t> ArrayStore::ints(const std::string& name) const
{
    const Entry& e = at(name);
    if (e.dtype != DType::i64) {
        throw Error("entry '" + name + "' is not an integer array");
    }
    std::vector<std::int64_t> v(element_count(e.shape));
    if (!v.empty()) std::memcpy(v.data(), e.data.data(), e.data.size());
    return v;
}

std::string ArrayStore::text(const std::string& name) const
{
    const Entry& e = at(name);
    if (e.dtype != DType::u8) {
        throw Error("entry '" + name + "' is not text");
    }
    return std::string(reinterpret_cast<const char*>(e.data.data()), e.data.size());
}

std::vector<std::string> ArrayStore::names() const
{
    std::vector<std::string> out;
    for (const auto& [name, _] : m_entries) out.push_back(name);
    return out;
}

std::vector<std::byte> ArrayStore::serialize() const
{
    std::vector<std::byte> out;
    for (char c : k_magic) out.push_back(static_cast<std::byte>(c));
    append_pod(out, k_version);
    append_pod(out, static_cast<std::uint32_t>(m_entries.size()));
    for (const auto& [name, e] : m_entries) {
        append_pod(out, static_cast<std::uint32_t>(name.size()));
        for (char c : name) out.push_back(static_cast<std::byte>(c));
        append_pod(out, static_cast<std::uint8_t>(e.dtype));
        append_pod(out, static_cast<std::uint8_t>(e.shape.size()));
        for (auto d : e.shape) append_pod(out, d);
        out.insert(out.end(), e.data.begin(), e.data.end());
    }
    return out;
}

ArrayStore ArrayStore::deserialize(const std::vector<std::byte>& bytes, const std::string& origin)
{
    Reader r(bytes, origin);
    const std::byte* magic = r.take(4);
    if (std::memcmp(magic, k_magic, 4) != 0) {
        throw Error("'" + origin + "' is not an array store (bad magic)");
    }
    if (r.pod<std::uint32_t>() != k_version) {
        throw Error("'" + origin + "' has an unsupported array store version");
    }
    const auto count = r.pod<std::uint32_t>();
    ArrayStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.pod<std::uint32_t>();
        const std::byte* name_ptr = r.take(name_len);
        std::string name(reinterpret_cast<const char*>(name_ptr), name_len);
        Entry e;
        const auto dtype = r.pod<std::uint8_t>();
        if (dtype > 2) throw Error("'" + origin + "': entry '" + name + "' has unknown dtype");
        e.dtype = static_cast<DType>(dtype);
        const auto rank = r.pod<std::uint8_t>();
        for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.pod<std::uint64_t>());
        const std::size_t nbytes = element_count(e.shape) * element_size(e.dtype);
        const std::byte* data = r.take(nbytes);
        e.data.assign(data, data + nbytes);
        store.m_entries[name] = std::move(e);
    }
    if (!r.done()) throw Error("'" + origin + "' has trailing bytes");
    return store;
}

void ArrayStore::save(const std::filesystem::path& path) const
{
    const auto bytes = serialize();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write '" + path.string() + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

ArrayStore ArrayStore::load(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::vector<std::byte> bytes(raw.size());
    if (!raw.empty()) std::memcpy(bytes.data(), raw.data(), raw.size());
    return deserialize(bytes, path.string());
}

} // namespace exprclone
