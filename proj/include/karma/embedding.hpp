#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "util.hpp"

namespace karma {

struct EmbeddingVector {
    std::vector<double> values;
    double norm = 0.0;

    static EmbeddingVector from_values(std::vector<double> v) {
        EmbeddingVector e;
        e.values = std::move(v);
        double acc = 0.0;
        for (double x : e.values) acc += x * x;
        e.norm = std::sqrt(acc);
        return e;
    }

    size_t dimension() const { return values.size(); }
};

// 1 - cosine similarity; degenerate (zero-norm) vectors sit at the far end.
inline double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dimension() != b.dimension())
        throw IndexError("dimension mismatch: " + std::to_string(a.dimension()) + " vs " +
                         std::to_string(b.dimension()));
    if (a.norm == 0.0 || b.norm == 0.0) return 2.0;
    double dot = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) dot += a.values[i] * b.values[i];
    return 1.0 - dot / (a.norm * b.norm);
}

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual EmbeddingVector embed(const std::string& text) const = 0;
    virtual size_t dimension() const = 0;
    virtual std::string provider_id() const = 0;
    virtual uint64_t seed() const = 0;
};

// Deterministic character n-gram hashing into D buckets, L2-normalized.
// Stands in for a learned text encoder so tests need no model.
class NgramHashProvider : public EmbeddingProvider {
public:
    explicit NgramHashProvider(size_t dimension = 64, uint64_t seed = 1, size_t n = 3,
                               bool case_fold = true)
        : dimension_(dimension), seed_(seed), n_(n), case_fold_(case_fold) {
        if (dimension_ == 0 || n_ == 0) throw ConfigError("embedding dimension and n must be > 0");
    }

    EmbeddingVector embed(const std::string& text) const override {
        std::string t = case_fold_ ? to_lower(text) : text;
        std::vector<double> buckets(dimension_, 0.0);
        if (t.size() < n_) {
            bump(buckets, t);
        } else {
            for (size_t i = 0; i + n_ <= t.size(); ++i) bump(buckets, t.substr(i, n_));
        }
        auto vec = EmbeddingVector::from_values(std::move(buckets));
        if (vec.norm > 0.0) {
            for (auto& x : vec.values) x /= vec.norm;
            vec = EmbeddingVector::from_values(std::move(vec.values));
        }
        return vec;
    }

    size_t dimension() const override { return dimension_; }
    std::string provider_id() const override { return "ngram-hash-v1"; }
    uint64_t seed() const override { return seed_; }

private:
    void bump(std::vector<double>& buckets, const std::string& gram) const {
        // FNV-1a, seed folded into the offset basis
        uint64_t h = 14695981039346656037ull ^ (seed_ * 0x9E3779B97F4A7C15ull);
        for (unsigned char c : gram) {
            h ^= c;
            h *= 1099511628211ull;
        }
        buckets[h % dimension_] += 1.0;
    }

    size_t dimension_;
    uint64_t seed_;
    size_t n_;
    bool case_fold_;
};

inline EmbeddingVector embed_text(const EmbeddingProvider& provider, const std::string& text) {
    if (trim(text).empty()) throw InvalidInputError("cannot embed empty text");
    return provider.embed(text);
}

class EntityIndex {
public:
    EntityIndex() = default;
    explicit EntityIndex(size_t dimension) : dimension_(dimension) {}

    void add(const std::string& id, EmbeddingVector vec) {
        if (dimension_ == 0) dimension_ = vec.dimension();
        if (vec.dimension() != dimension_)
            throw IndexError("index dimension " + std::to_string(dimension_) +
                             ", entry dimension " + std::to_string(vec.dimension()));
        entries_[id] = std::move(vec);
    }

    bool empty() const { return entries_.empty(); }
    size_t size() const { return entries_.size(); }
    size_t dimension() const { return dimension_; }
    const std::map<std::string, EmbeddingVector>& entries() const { return entries_; }

private:
    std::map<std::string, EmbeddingVector> entries_;
    size_t dimension_ = 0;
};

struct NearestResult {
    bool novel = false;
    std::string id;       // empty when novel
    double distance = 0;  // distance to the winner; min distance when novel and index non-empty
};

// Linear-scan argmin over the index; min distance > rho means novel.
// Ties broken by lexicographically smallest id (map iteration order).
inline NearestResult nearest_entity(const EntityIndex& index, const EmbeddingVector& mention_vec,
                                    double rho) {
    if (!(rho > 0.0 && rho <= 2.0)) throw ConfigError("rho must be in (0, 2]");
    NearestResult best;
    if (index.empty()) {
        best.novel = true;
        best.distance = 2.0;
        return best;
    }
    bool first = true;
    for (const auto& [id, vec] : index.entries()) {
        double d = cosine_distance(mention_vec, vec);
        if (first || d < best.distance) {
            best.id = id;
            best.distance = d;
            first = false;
        }
    }
    if (best.distance > rho) {
        best.novel = true;
        best.id.clear();
    }
    return best;
}

// --- binary index cache ---
// Layout: magic, dimension u32, seed u64, provider id (u32 len + bytes),
// entry count u64, then per entry: id (u32 len + bytes) + dimension f32 values.
// Raw little-endian scalars; this cache is host-local, not portable.

namespace detail {

constexpr char kIndexMagic[8] = {'K', 'A', 'R', 'M', 'A', 'I', 'X', '1'};

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(in);
}

inline void write_string(std::ofstream& out, const std::string& s) {
    write_raw(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline bool read_string(std::ifstream& in, std::string& s) {
    uint32_t len = 0;
    if (!read_raw(in, len)) return false;
    if (len > (1u << 20)) return false;
    s.resize(len);
    in.read(s.data(), len);
    return static_cast<bool>(in);
}

}  // namespace detail

inline void save_index_cache(const EntityIndex& index, const EmbeddingProvider& provider,
                             const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IndexError("cannot write index cache: " + path);
    out.write(detail::kIndexMagic, sizeof(detail::kIndexMagic));
    detail::write_raw(out, static_cast<uint32_t>(index.dimension()));
    detail::write_raw(out, provider.seed());
    detail::write_string(out, provider.provider_id());
    detail::write_raw(out, static_cast<uint64_t>(index.size()));
    for (const auto& [id, vec] : index.entries()) {
        detail::write_string(out, id);
        for (double x : vec.values) detail::write_raw(out, static_cast<float>(x));
    }
}

// Empty optional when the file is missing, corrupt, or stale (provider id,
// seed, or dimension changed); callers rebuild in that case.
inline std::optional<EntityIndex> load_index_cache(const std::string& path,
                                                   const EmbeddingProvider& provider) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    char magic[sizeof(detail::kIndexMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kIndexMagic, sizeof(magic)) != 0) return std::nullopt;
    uint32_t dim = 0;
    uint64_t seed = 0;
    std::string provider_id;
    if (!detail::read_raw(in, dim) || !detail::read_raw(in, seed) ||
        !detail::read_string(in, provider_id))
        return std::nullopt;
    if (dim != provider.dimension() || seed != provider.seed() ||
        provider_id != provider.provider_id())
        return std::nullopt;
    uint64_t count = 0;
    if (!detail::read_raw(in, count)) return std::nullopt;
    EntityIndex index(dim);
    for (uint64_t i = 0; i < count; ++i) {
        std::string id;
        if (!detail::read_string(in, id)) return std::nullopt;
        std::vector<double> values(dim);
        for (uint32_t k = 0; k < dim; ++k) {
            float x = 0.0f;
            if (!detail::read_raw(in, x)) return std::nullopt;
            values[k] = static_cast<double>(x);
        }
        index.add(id, EmbeddingVector::from_values(std::move(values)));
    }
    return index;
}

}  // namespace karma
