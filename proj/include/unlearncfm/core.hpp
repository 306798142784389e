#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace unlearncfm {

/// Row-major T x D block of frames. Row t is one frame.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Token = std::uint16_t;
using TokenSeq = std::vector<Token>;

enum class ErrorKind {
    InvalidArgument,
    ShapeMismatch,
    NonFinite,
    Singular,
    Format,
    Io,
    Diverged,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Seeds and random streams

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Named substream of a parent seed. Used so every stage and every sample
/// gets an RNG that does not depend on what other stages consumed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    return splitmix64(seed ^ splitmix64(hash_str(name)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a) {
    return splitmix64(seed ^ splitmix64(a + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t a) {
    return derive_seed(derive_seed(seed, name), a);
}

using Rng = std::mt19937_64;

inline Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    std::normal_distribution<double> nd(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// ---------------------------------------------------------------------------
// Little-endian binary IO

namespace io {

template <typename T>
void put(std::ostream& os, T v) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    require(static_cast<std::size_t>(is.gcount()) == sizeof(T), ErrorKind::Format, "unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string buf(magic.size(), '\0');
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    require(is.gcount() == static_cast<std::streamsize>(magic.size()) && buf == magic, ErrorKind::Format,
            "bad magic, expected " + std::string(magic));
}

inline void put_string(std::ostream& os, std::string_view s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
    auto n = get<std::uint32_t>(is);
    require(n < (1u << 24), ErrorKind::Format, "string length out of range");
    std::string s(n, '\0');
    is.read(s.data(), n);
    require(is.gcount() == static_cast<std::streamsize>(n), ErrorKind::Format, "unexpected end of file");
    return s;
}

inline void put_matrix(std::ostream& os, const Matrix& m) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put<double>(os, m.data()[i]);
}

inline Matrix get_matrix(std::istream& is) {
    auto r = get<std::uint32_t>(is);
    auto c = get<std::uint32_t>(is);
    require(static_cast<std::uint64_t>(r) * c < (1ull << 28), ErrorKind::Format, "matrix size out of range");
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get<double>(is);
    return m;
}

inline void put_vector(std::ostream& os, const Vector& v) {
    put<std::uint64_t>(os, static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(os, v[i]);
}

inline Vector get_vector(std::istream& is) {
    auto n = get<std::uint64_t>(is);
    require(n < (1ull << 28), ErrorKind::Format, "vector size out of range");
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = get<double>(is);
    return v;
}

}  // namespace io

}  // namespace unlearncfm
