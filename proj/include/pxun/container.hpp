#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pxun/errors.hpp"

namespace pxun {

// One tensor in a container file. Values are held as doubles regardless of
// on-disk width; width-4 payloads round-trip bit-exactly because every
// float is representable as a double.
struct ContainerEntry {
    std::vector<std::uint32_t> shape;
    int width = 8;  // bytes per scalar on disk: 4 or 8
    std::vector<double> values;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }
};

// Named-tensor container: magic "PXUN", version u16, count u32, then per
// tensor name (u16 length + UTF-8), rank u8, extents u32, width u8 and a
// little-endian IEEE-754 payload. Entry order is preserved so identical
// contents serialize to identical bytes.
class Container {
public:
    void put(const std::string& name, ContainerEntry entry);
    bool contains(const std::string& name) const;
    const ContainerEntry& at(const std::string& name) const;
    const std::vector<std::pair<std::string, ContainerEntry>>& entries() const { return entries_; }

    std::vector<std::uint8_t> serialize() const;
    static Container parse(const std::vector<std::uint8_t>& bytes);

    void save(const std::string& path) const;
    static Container load(const std::string& path);

    // FNV-1a over the serialized bytes; used for checkpoint identity audits.
    std::uint64_t hash() const;

    // Convenience for scalar attributes stored as 1-element tensors.
    void put_scalar(const std::string& name, double v);
    double scalar(const std::string& name) const;

    // Stores/extracts a UTF-8 string as a width-8 byte-per-value tensor.
    void put_text(const std::string& name, const std::string& text);
    std::string text(const std::string& name) const;

private:
    std::vector<std::pair<std::string, ContainerEntry>> entries_;
};

}  // namespace pxun
