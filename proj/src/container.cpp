#include "pxun/container.hpp"

#include <cstring>
#include <fstream>

namespace pxun {

namespace {

constexpr char kMagic[4] = {'P', 'X', 'U', 'N'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::vector<std::uint8_t>& b;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > b.size()) throw IoError("container: truncated file");
    }
    std::uint8_t u8() {
        need(1);
        return b[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(b[pos] | (b[pos + 1] << 8));
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
};

}  // namespace

void Container::put(const std::string& name, ContainerEntry entry) {
    if (entry.width != 4 && entry.width != 8) throw ValueError("container: scalar width must be 4 or 8");
    if (entry.values.size() != entry.numel()) throw ShapeError("container: value count does not match extents");
    for (auto& kv : entries_) {
        if (kv.first == name) {
            kv.second = std::move(entry);
            return;
        }
    }
    entries_.emplace_back(name, std::move(entry));
}

bool Container::contains(const std::string& name) const {
    for (const auto& kv : entries_)
        if (kv.first == name) return true;
    return false;
}

const ContainerEntry& Container::at(const std::string& name) const {
    for (const auto& kv : entries_)
        if (kv.first == name) return kv.second;
    throw IoError("container: missing tensor '" + name + "'");
}

std::vector<std::uint8_t> Container::serialize() const {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
        if (name.size() > 0xffff) throw ValueError("container: name too long");
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(e.shape.size()));
        for (auto ext : e.shape) put_u32(out, ext);
        out.push_back(static_cast<std::uint8_t>(e.width));
        if (e.width == 8) {
            for (double v : e.values) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(out, bits);
            }
        } else {
            for (double v : e.values) {
                const float f = static_cast<float>(v);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(out, bits);
            }
        }
    }
    return out;
}

Container Container::parse(const std::vector<std::uint8_t>& bytes) {
    Reader r{bytes};
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("container: bad magic");
    r.pos = 4;
    const auto version = r.u16();
    if (version != kVersion) throw IoError("container: unsupported version");
    const auto count = r.u32();
    Container c;
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = r.u16();
        r.need(name_len);
        std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
        r.pos += name_len;
        ContainerEntry e;
        const int rank = r.u8();
        e.shape.resize(rank);
        for (int i = 0; i < rank; ++i) e.shape[i] = r.u32();
        e.width = r.u8();
        if (e.width != 4 && e.width != 8) throw IoError("container: bad scalar width");
        const std::size_t n = e.numel();
        e.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (e.width == 8) {
                const std::uint64_t bits = r.u64();
                double v;
                std::memcpy(&v, &bits, 8);
                e.values[i] = v;
            } else {
                const std::uint32_t bits = r.u32();
                float f;
                std::memcpy(&f, &bits, 4);
                e.values[i] = static_cast<double>(f);
            }
        }
        c.entries_.emplace_back(std::move(name), std::move(e));
    }
    if (r.pos != bytes.size()) throw IoError("container: trailing bytes");
    return c;
}

void Container::save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("container: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("container: write failed for '" + path + "'");
}

Container Container::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("container: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(bytes);
}

std::uint64_t Container::hash() const {
    const auto bytes = serialize();
    std::uint64_t h = 1469598103934665603ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
    }
    return h;
}

void Container::put_scalar(const std::string& name, double v) {
    ContainerEntry e;
    e.shape = {1};
    e.width = 8;
    e.values = {v};
    put(name, std::move(e));
}

double Container::scalar(const std::string& name) const {
    const auto& e = at(name);
    if (e.values.size() != 1) throw IoError("container: '" + name + "' is not a scalar");
    return e.values[0];
}

void Container::put_text(const std::string& name, const std::string& text) {
    ContainerEntry e;
    e.shape = {static_cast<std::uint32_t>(text.size())};
    e.width = 8;
    e.values.reserve(text.size());
    for (unsigned char ch : text) e.values.push_back(static_cast<double>(ch));
    put(name, std::move(e));
}

std::string Container::text(const std::string& name) const {
    const auto& e = at(name);
    std::string s;
    s.reserve(e.values.size());
    for (double v : e.values) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return s;
}

}  // namespace pxun
