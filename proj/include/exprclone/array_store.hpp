#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace exprclone {

///
/// Binary container of named n-dimensional arrays.
///
/// Layout (little-endian): magic "EXNA", u32 version, u32 entry count, then per entry
/// u32 name length, name bytes, u8 dtype (0 = f64, 1 = i64, 2 = u8), u8 rank,
/// u64 dims[rank], raw data. Entries are written in name order so identical contents
/// give identical bytes.
///
class ArrayStore {
public:
    enum class DType : std::uint8_t { f64 = 0, i64 = 1, u8 = 2 };

    struct Entry {
        DType dtype = DType::f64;
        std::vector<std::uint64_t> shape;
        std::vector<std::byte> data;
    };

    void put(const std::string& name, const Eigen::MatrixXd& m);
    void put(const std::string& name, const Eigen::VectorXd& v);
    void put(const std::string& name, const std::vector<std::int64_t>& v);
    void put_text(const std::string& name, const std::string& text);

    bool contains(const std::string& name) const { return m_entries.count(name) != 0; }
    const Entry& at(const std::string& name) const;

    Eigen::MatrixXd matrix(const std::string& name) const;
    Eigen::VectorXd vector(const std::string& name) const;
    std::vector<std::int64_t> ints(const std::string& name) const;
    std::string text(const std::string& name) const;

    std::vector<std::string> names() const;

    void save(const std::filesystem::path& path) const;
    static ArrayStore load(const std::filesystem::path& path);

    std::vector<std::byte> serialize() const;
    static ArrayStore deserialize(const std::vector<std::byte>& bytes, const std::string& origin);

private:
    std::map<std::string, Entry> m_entries;
};

} // namespace exprclone
