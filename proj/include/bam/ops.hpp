#pragma once

// Differentiable operations over bam::Tensor. Each function computes its value
// eagerly and records a backward rule when any input requires a gradient.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bam/error.hpp"
#include "bam/rng.hpp"
#include "bam/special.hpp"
#include "bam/tensor.hpp"

namespace bam {

/// Dense boolean admissibility pattern for an m x n score matrix.
struct Mask
{
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;

    static Mask all(std::size_t rows, std::size_t cols)
    {
        return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
    }
    static Mask none(std::size_t rows, std::size_t cols)
    {
        return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
    }

    bool allowed(std::size_t i, std::size_t j) const { return keep[i * cols + j] != 0; }
    void set(std::size_t i, std::size_t j, bool on = true) { keep[i * cols + j] = on ? 1 : 0; }
    std::size_t count() const
    {
        std::size_t c = 0;
        for (auto k : keep) c += k != 0;
        return c;
    }
};

/// Compressed sparse rows: the admissible (row, col) pairs of a sparse score
/// matrix, ordered row-major. Entry e of an edge vector lives at (row_of(e), col[e]).
struct Csr
{
    std::size_t num_rows = 0;
    std::size_t num_cols = 0;
    std::vector<std::size_t> row_ptr{0};
    std::vector<std::size_t> col;

    std::size_t nnz() const { return col.size(); }

    std::vector<std::size_t> row_index() const
    {
        std::vector<std::size_t> rows(nnz());
        for (std::size_t i = 0; i < num_rows; ++i) {
            for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) rows[e] = i;
        }
        return rows;
    }

    static Csr from_mask(const Mask& mask)
    {
        Csr csr;
        csr.num_rows = mask.rows;
        csr.num_cols = mask.cols;
        csr.row_ptr.assign(mask.rows + 1, 0);
        for (std::size_t i = 0; i < mask.rows; ++i) {
            for (std::size_t j = 0; j < mask.cols; ++j) {
                if (mask.allowed(i, j)) csr.col.push_back(j);
            }
            csr.row_ptr[i + 1] = csr.col.size();
        }
        return csr;
    }

    Mask to_mask() const
    {
        auto mask = Mask::none(num_rows, num_cols);
        for (std::size_t i = 0; i < num_rows; ++i) {
            for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) mask.set(i, col[e]);
        }
        return mask;
    }
};

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op)
{
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
    }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t k = 0; k < rank; ++k) {
        const std::size_t da = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
        const std::size_t db = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                 " with " + shape_str(b));
        }
        out[k] = std::max(da, db);
    }
    return out;
}

// Flat input index for every flat output index under right-aligned broadcasting.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in)
{
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> map(n);
    if (in == out) {
        std::iota(map.begin(), map.end(), std::size_t{0});
        return map;
    }
    if (shape_numel(in) == 1) {
        return map;  // all zeros
    }
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    std::vector<std::size_t> in_stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        in_stride[k + offset] = in[k] == 1 ? 0 : s;
        s *= in[k];
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t flat_in = 0;
    for (std::size_t o = 0; o < n; ++o) {
        map[o] = flat_in;
        for (std::size_t k = rank; k-- > 0;) {
            ++idx[k];
            flat_in += in_stride[k];
            if (idx[k] < out[k]) break;
            flat_in -= in_stride[k] * idx[k];
            idx[k] = 0;
        }
    }
    return map;
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df)
{
    const auto x = a.values();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    auto pa = a.node_ptr();
    return make_result(a.shape(), std::move(y), {pa}, [pa, df](const Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa->grad[i] += self.grad[i] * df(pa->value[i], self.value[i]);
        }
    });
}

// df_da / df_db receive (a, b, out).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db)
{
    const Shape out = broadcast_shape(a.shape(), b.shape(), name);
    const std::size_t n = shape_numel(out);
    // equal shapes skip the index maps
    if (a.shape() == b.shape()) {
        const auto xa = a.values();
        const auto xb = b.values();
        std::vector<double> y(n);
        for (std::size_t o = 0; o < n; ++o) y[o] = f(xa[o], xb[o]);
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        return make_result(out, std::move(y), {pa, pb}, [pa, pb, da, db](const Node& self) {
            for (std::size_t o = 0; o < self.grad.size(); ++o) {
                const double g = self.grad[o];
                if (pa->requires_grad) pa->grad[o] += g * da(pa->value[o], pb->value[o], self.value[o]);
                if (pb->requires_grad) pb->grad[o] += g * db(pa->value[o], pb->value[o], self.value[o]);
            }
        });
    }
    // b repeating along the leading axis (a row vector or a single value)
    // indexes by o % period
    const std::size_t period = b.numel();
    if (a.shape() == out && period > 0 && n % period == 0 &&
        (period == 1 || (b.rank() == 2 && b.rows() == 1 && a.rank() == 2 && a.cols() == period))) {
        const auto xa = a.values();
        const auto xb = b.values();
        std::vector<double> y(n);
        for (std::size_t o = 0; o < n; ++o) y[o] = f(xa[o], xb[o % period]);
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        return make_result(out, std::move(y), {pa, pb}, [pa, pb, da, db, period](const Node& self) {
            for (std::size_t o = 0; o < self.grad.size(); ++o) {
                const double g = self.grad[o];
                const double vb = pb->value[o % period];
                if (pa->requires_grad) pa->grad[o] += g * da(pa->value[o], vb, self.value[o]);
                if (pb->requires_grad) pb->grad[o % period] += g * db(pa->value[o], vb, self.value[o]);
            }
        });
    }
    auto map_a = broadcast_map(out, a.shape());
    auto map_b = broadcast_map(out, b.shape());
    const auto xa = a.values();
    const auto xb = b.values();
    std::vector<double> y(n);
    for (std::size_t o = 0; o < n; ++o) y[o] = f(xa[map_a[o]], xb[map_b[o]]);
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return make_result(out, std::move(y), {pa, pb},
                       [pa, pb, da, db, map_a = std::move(map_a),
                        map_b = std::move(map_b)](const Node& self) {
                           for (std::size_t o = 0; o < self.grad.size(); ++o) {
                               const double g = self.grad[o];
                               const double va = pa->value[map_a[o]];
                               const double vb = pb->value[map_b[o]];
                               if (pa->requires_grad) {
                                   pa->grad[map_a[o]] += g * da(va, vb, self.value[o]);
                               }
                               if (pb->requires_grad) {
                                   pb->grad[map_b[o]] += g * db(va, vb, self.value[o]);
                               }
                           }
                       });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and reshaping

/// a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b)
{
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                             " * " + shape_str(b.shape()));
    }
    const auto va = a.values();
    const auto vb = b.values();
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    if (n == 1) {
        // matrix-vector product: one dot product per row
        std::vector<double> y(m, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += va[i * k + p] * vb[p];
            y[i] = acc;
        }
        return detail::make_result({m, 1}, std::move(y), {pa, pb}, [pa, pb, m, k](const detail::Node& self) {
            const auto& g = self.grad;
            for (std::size_t i = 0; i < m; ++i) {
                const double gi = g[i];
                if (gi == 0.0) continue;
                if (pa->requires_grad)
                    for (std::size_t p = 0; p < k; ++p) pa->grad[i * k + p] += gi * pb->value[p];
                if (pb->requires_grad)
                    for (std::size_t p = 0; p < k; ++p) pb->grad[p] += gi * pa->value[i * k + p];
            }
        });
    }
    std::vector<double> y(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* yrow = &y[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = va[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &vb[p * n];
            for (std::size_t j = 0; j < n; ++j) yrow[j] += aip * brow[j];
        }
    }
    return detail::make_result({m, n}, std::move(y), {pa, pb}, [pa, pb, m, k, n](const detail::Node& self) {
        const auto& g = self.grad;
        if (pa->requires_grad) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double* brow = &pb->value[p * n];
                    const double* grow = &g[i * n];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    pa->grad[i * k + p] += acc;
                }
            }
        }
        if (pb->requires_grad) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = &g[i * n];
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = pa->value[i * k + p];
                    if (aip == 0.0) continue;
                    double* gb = &pb->grad[p * n];
                    for (std::size_t j = 0; j < n; ++j) gb[j] += aip * grow[j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& a)
{
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    const auto x = a.values();
    std::vector<double> y(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
    auto pa = a.node_ptr();
    return detail::make_result({n, m}, std::move(y), {pa}, [pa, m, n](const detail::Node& self) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape)
{
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> y(a.values().begin(), a.values().end());
    auto pa = a.node_ptr();
    return detail::make_result(std::move(shape), std::move(y), {pa}, [pa](const detail::Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor exp(const Tensor& a)
{
    return detail::unary(a, [](double x) { return std::exp(x); },
                         [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a)
{
    for (double x : a.values()) {
        if (!(x > 0.0)) {
            throw DomainError("log: non-positive argument " + std::to_string(x));
        }
    }
    return detail::unary(a, [](double x) { return std::log(x); },
                         [](double x, double) { return 1.0 / x; });
}

inline Tensor neg(const Tensor& a)
{
    return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor relu(const Tensor& a)
{
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// Exponential linear unit with unit scale.
inline Tensor elu(const Tensor& a)
{
    return detail::unary(a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
                         [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope)
{
    return detail::unary(a, [slope](double x) { return x > 0.0 ? x : slope * x; },
                         [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Tensor pow(const Tensor& a, double p)
{
    if (p != std::floor(p)) {
        for (double x : a.values()) {
            if (x < 0.0) throw DomainError("pow: negative base with non-integer exponent");
        }
    }
    return detail::unary(a, [p](double x) { return std::pow(x, p); },
                         [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

inline Tensor square(const Tensor& a)
{
    return detail::unary(a, [](double x) { return x * x; },
                         [](double x, double) { return 2.0 * x; });
}

/// Elementwise log Γ with ψ as derivative.
inline Tensor lgamma(const Tensor& a)
{
    for (double x : a.values()) {
        if (!(x > 0.0)) throw DomainError("lgamma: non-positive argument " + std::to_string(x));
    }
    return detail::unary(a, [](double x) { return bam::lgamma(x); },
                         [](double x, double) { return bam::digamma(x); });
}

inline Tensor scale(const Tensor& a, double c)
{
    return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor shift(const Tensor& a, double c)
{
    return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b)
{
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b)
{
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b)
{
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b)
{
    for (double y : b.values()) {
        if (y == 0.0) throw DomainError("div: division by zero");
    }
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }

/// Zeroes the entries of x that the mask excludes.
inline Tensor apply_mask(const Tensor& x, const Mask& mask)
{
    if (x.rank() != 2 || x.rows() != mask.rows || x.cols() != mask.cols) {
        throw DimensionError("apply_mask: mask does not match " + shape_str(x.shape()));
    }
    std::vector<double> keep(mask.keep.begin(), mask.keep.end());
    return mul(x, Tensor(x.shape(), std::move(keep)));
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a)
{
    double s = 0.0;
    for (double x : a.values()) s += x;
    auto pa = a.node_ptr();
    return detail::make_result({}, {s}, {pa}, [pa](const detail::Node& self) {
        for (auto& g : pa->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum over one axis. With keepdim the reduced axis is kept with extent 1.
inline Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false)
{
    if (axis >= a.rank()) {
        throw DimensionError("sum: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(a.shape()));
    }
    const Shape& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
    for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
    const std::size_t len = s[axis];
    Shape out = s;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    const auto x = a.values();
    std::vector<double> y(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * len + l) * inner + i];
    auto pa = a.node_ptr();
    return detail::make_result(out, std::move(y), {pa},
                               [pa, outer, inner, len](const detail::Node& self) {
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t l = 0; l < len; ++l)
                                           for (std::size_t i = 0; i < inner; ++i)
                                               pa->grad[(o * len + l) * inner + i] +=
                                                   self.grad[o * inner + i];
                               });
}

inline Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false)
{
    const double len = static_cast<double>(a.dim(axis));
    return scale(sum(a, axis, keepdim), 1.0 / len);
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise softmax of an m x n matrix. Masked entries are exactly zero and
/// receive no gradient; each row is shifted by its maximum admissible entry.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr)
{
    detail::require_rank(x, 2, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (mask && (mask->rows != m || mask->cols != n)) {
        throw DimensionError("softmax_rows: mask shape differs from " + shape_str(x.shape()));
    }
    const auto v = x.values();
    std::vector<double> y(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            mx = std::max(mx, v[i * n + j]);
            any = true;
        }
        if (!any) {
            throw DegenerateRowError("softmax_rows: row " + std::to_string(i) +
                                     " has no admissible entries");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask && !mask->allowed(i, j)) continue;
            const double e = std::exp(v[i * n + j] - mx);
            y[i * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= z;
    }
    auto px = x.node_ptr();
    return detail::make_result({m, n}, std::move(y), {px}, [px, m, n](const detail::Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                const double yv = self.value[i * n + j];
                px->grad[i * n + j] += yv * (self.grad[i * n + j] - dot);
            }
        }
    });
}

/// Softmax over each CSR row of an edge vector x[nnz].
inline Tensor segment_softmax(const Tensor& x, const Csr& csr)
{
    if (x.numel() != csr.nnz()) {
        throw DimensionError("segment_softmax: " + std::to_string(x.numel()) +
                             " values for " + std::to_string(csr.nnz()) + " entries");
    }
    const auto v = x.values();
    std::vector<double> y(v.size(), 0.0);
    for (std::size_t i = 0; i < csr.num_rows; ++i) {
        const std::size_t b = csr.row_ptr[i], e = csr.row_ptr[i + 1];
        if (b == e) {
            throw DegenerateRowError("segment_softmax: row " + std::to_string(i) +
                                     " has no admissible entries");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = b; k < e; ++k) mx = std::max(mx, v[k]);
        double z = 0.0;
        for (std::size_t k = b; k < e; ++k) {
            y[k] = std::exp(v[k] - mx);
            z += y[k];
        }
        for (std::size_t k = b; k < e; ++k) y[k] /= z;
    }
    auto px = x.node_ptr();
    return detail::make_result(x.shape(), std::move(y), {px},
                               [px, row_ptr = csr.row_ptr](const detail::Node& self) {
                                   for (std::size_t i = 0; i + 1 < row_ptr.size(); ++i) {
                                       double dot = 0.0;
                                       for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k)
                                           dot += self.grad[k] * self.value[k];
                                       for (std::size_t k = row_ptr[i]; k < row_ptr[i + 1]; ++k)
                                           px->grad[k] += self.value[k] * (self.grad[k] - dot);
                                   }
                               });
}

/// out[i, :] = sum over CSR row i of w[e] * v[col[e], :].
inline Tensor spmm(const Tensor& w, const Csr& csr, const Tensor& v)
{
    detail::require_rank(v, 2, "spmm");
    if (w.numel() != csr.nnz() || v.rows() != csr.num_cols) {
        throw DimensionError("spmm: weights/values do not match the sparsity pattern");
    }
    const std::size_t d = v.cols();
    const auto wv = w.values();
    const auto vv = v.values();
    std::vector<double> y(csr.num_rows * d, 0.0);
    for (std::size_t i = 0; i < csr.num_rows; ++i) {
        for (std::size_t e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) {
            const double we = wv[e];
            const double* vr = &vv[csr.col[e] * d];
            for (std::size_t c = 0; c < d; ++c) y[i * d + c] += we * vr[c];
        }
    }
    auto pw = w.node_ptr();
    auto pv = v.node_ptr();
    return detail::make_result(
        {csr.num_rows, d}, std::move(y), {pw, pv},
        [pw, pv, d, row_ptr = csr.row_ptr, col = csr.col](const detail::Node& self) {
            for (std::size_t i = 0; i + 1 < row_ptr.size(); ++i) {
                const double* g = &self.grad[i * d];
                for (std::size_t e = row_ptr[i]; e < row_ptr[i + 1]; ++e) {
                    const std::size_t j = col[e];
                    if (pw->requires_grad) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c) acc += g[c] * pv->value[j * d + c];
                        pw->grad[e] += acc;
                    }
                    if (pv->requires_grad) {
                        const double we = pw->value[e];
                        for (std::size_t c = 0; c < d; ++c) pv->grad[j * d + c] += we * g[c];
                    }
                }
            }
        });
}

/// Rows of x[n x d] selected by index, giving [idx.size() x d].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index)
{
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t n = x.rows(), d = x.cols();
    const auto v = x.values();
    std::vector<double> y(index.size() * d);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= n) throw DimensionError("gather_rows: index out of range");
        std::copy_n(&v[index[r] * d], d, &y[r * d]);
    }
    auto px = x.node_ptr();
    std::vector<std::size_t> idx(index.begin(), index.end());
    return detail::make_result({index.size(), d}, std::move(y), {px},
                               [px, d, idx = std::move(idx)](const detail::Node& self) {
                                   for (std::size_t r = 0; r < idx.size(); ++r)
                                       for (std::size_t c = 0; c < d; ++c)
                                           px->grad[idx[r] * d + c] += self.grad[r * d + c];
                               });
}

/// Mean negative log-likelihood of integer labels under row-softmax(logits),
/// over the listed rows.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                            std::span<const std::size_t> rows)
{
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t c = logits.cols();
    if (labels.size() != logits.rows()) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(logits.rows()) + " rows");
    }
    if (rows.empty()) throw DimensionError("cross_entropy: no labeled rows");
    const auto v = logits.values();
    std::vector<double> probs(rows.size() * c);
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t i = rows[r];
        if (i >= logits.rows()) throw DimensionError("cross_entropy: row out of range");
        const int label = labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= c) {
            throw DimensionError("cross_entropy: label out of range");
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, v[i * c + k]);
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) z += std::exp(v[i * c + k] - mx);
        const double log_z = mx + std::log(z);
        total += log_z - v[i * c + static_cast<std::size_t>(label)];
        for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(v[i * c + k] - log_z);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    auto pl = logits.node_ptr();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    std::vector<int> lab(labels.begin(), labels.end());
    return detail::make_result(
        {}, {total * inv}, {pl},
        [pl, c, inv, rv = std::move(rv), lab = std::move(lab), probs = std::move(probs)](
            const detail::Node& self) {
            const double g = self.grad[0] * inv;
            for (std::size_t r = 0; r < rv.size(); ++r) {
                const std::size_t i = rv[r];
                for (std::size_t k = 0; k < c; ++k) pl->grad[i * c + k] += g * probs[r * c + k];
                pl->grad[i * c + static_cast<std::size_t>(lab[i])] -= g;
            }
        });
}

// ---------------------------------------------------------------------------
// Structure

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis)
{
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t k = 0; k < s.size(); ++k) {
            if (k != axis && s[k] != s0[k]) {
                throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " +
                                     shape_str(s));
            }
        }
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= s0[k];
    for (std::size_t k = axis + 1; k < s0.size(); ++k) inner *= s0[k];
    Shape out = s0;
    out[axis] = total;
    std::vector<double> y(shape_numel(out));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.shape()[axis];
        const auto v = p.values();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(&v[o * len * inner], len * inner, &y[(o * total + off) * inner]);
        off += len;
    }
    std::vector<detail::NodePtr> parents;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        parents.push_back(p.node_ptr());
        lens.push_back(p.shape()[axis]);
    }
    auto captured = parents;
    return detail::make_result(
        out, std::move(y), std::move(parents),
        [captured, lens, offsets, outer, inner, total](const detail::Node& self) {
            for (std::size_t p = 0; p < captured.size(); ++p) {
                if (!captured[p]->requires_grad) continue;
                const std::size_t len = lens[p];
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t t = 0; t < len * inner; ++t)
                        captured[p]->grad[o * len * inner + t] +=
                            self.grad[(o * total + offsets[p]) * inner + t];
            }
        });
}

/// Inverted dropout. With a support mask only admissible entries are dropped
/// (and only they consume random draws, row-major).
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training,
                      const Mask* support = nullptr)
{
    if (!(p >= 0.0 && p < 1.0)) {
        throw ParameterError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        return x;
    }
    const std::size_t n = x.numel();
    std::vector<double> keep(n, 0.0);
    const double scale_kept = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < n; ++i) {
        if (support && !support->keep[i]) continue;
        keep[i] = rng.uniform() < p ? 0.0 : scale_kept;
    }
    return mul(x, Tensor(x.shape(), std::move(keep)));
}

}  // namespace bam
