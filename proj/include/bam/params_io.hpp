#pragma once

// Trained parameters on disk:
//
//   bam-params v1
//   seed <seed>
//   tensor <name> <d0>x<d1>...
//   <values of one row, hexfloat, space separated>
//   ...
//   sha256 <digest of every preceding byte>
//
// Hexfloat keeps the values exact.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "bam/data.hpp"
#include "bam/objective.hpp"

namespace bam {

inline constexpr const char* kParamsFormat = "bam-params v1";

struct StoredTensor
{
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct ParamsFile
{
    std::uint64_t seed = 0;
    std::vector<StoredTensor> tensors;
};

inline std::string shape_string(const Shape& s)
{
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out.empty() ? "scalar" : out;
}

inline std::string params_text(std::uint64_t seed, const std::vector<NamedTensor>& params)
{
    std::string out = std::string(kParamsFormat) + "\nseed " + std::to_string(seed) + "\n";
    char buf[64];
    for (const auto& p : params) {
        const Shape& shape = p.tensor.shape();
        out += "tensor " + p.name + " " + shape_string(shape) + "\n";
        const auto v = p.tensor.values();
        const std::size_t width = shape.empty() ? 1 : shape.back();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const auto r = std::to_chars(buf, buf + sizeof buf, v[i], std::chars_format::hex);
            out.append(buf, r.ptr);
            out += (i + 1) % width == 0 ? '\n' : ' ';
        }
    }
    out += "sha256 " + sha256_hex(out) + "\n";
    return out;
}

inline void save_params(const std::filesystem::path& path, std::uint64_t seed, const std::vector<NamedTensor>& params)
{
    write_file(path, params_text(seed, params));
}

inline ParamsFile parse_params(const std::string& text, const std::string& source = "<params>")
{
    const auto tail = text.rfind("sha256 ", text.size() >= 8 ? text.size() - 8 : 0);
    if (tail == std::string::npos || (tail != 0 && text[tail - 1] != '\n')) {
        throw IntegrityError(source + ": missing checksum line");
    }
    std::string digest = text.substr(tail + 7);
    while (!digest.empty() && (digest.back() == '\n' || digest.back() == '\r')) digest.pop_back();
    if (digest != sha256_hex(std::string_view(text).substr(0, tail))) {
        throw IntegrityError(source + ": checksum mismatch");
    }

    ParamsFile f;
    std::istringstream in(text.substr(0, tail));
    std::string line;
    std::size_t lineno = 0;
    const auto next = [&]() -> bool {
        if (!std::getline(in, line)) return false;
        ++lineno;
        return true;
    };
    if (!next() || line != kParamsFormat) throw ParseError(source, 1, "expected '" + std::string(kParamsFormat) + "'");
    if (!next() || line.rfind("seed ", 0) != 0) throw ParseError(source, lineno, "expected 'seed <n>'");
    {
        const auto s = line.substr(5);
        const auto r = std::from_chars(s.data(), s.data() + s.size(), f.seed);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ParseError(source, lineno, "bad seed");
    }
    while (next()) {
        std::istringstream hdr(line);
        std::string word, name, shape_s;
        if (!(hdr >> word >> name >> shape_s) || word != "tensor") {
            throw ParseError(source, lineno, "expected 'tensor <name> <shape>'");
        }
        StoredTensor t;
        t.name = name;
        if (shape_s != "scalar") {
            std::size_t start = 0;
            while (start <= shape_s.size()) {
                const auto end = std::min(shape_s.find('x', start), shape_s.size());
                std::size_t d = 0;
                const auto r = std::from_chars(shape_s.data() + start, shape_s.data() + end, d);
                if (r.ec != std::errc() || r.ptr != shape_s.data() + end) throw ParseError(source, lineno, "bad shape");
                t.shape.push_back(d);
                start = end + 1;
            }
        }
        const std::size_t count = shape_numel(t.shape);
        const std::size_t width = t.shape.empty() ? 1 : t.shape.back();
        const std::size_t rows = width == 0 ? 0 : count / width;
        t.values.reserve(count);
        for (std::size_t r = 0; r < rows; ++r) {
            if (!next()) throw ParseError(source, lineno + 1, "tensor '" + t.name + "' is truncated");
            const char* p = line.data();
            const char* end = p + line.size();
            for (std::size_t c = 0; c < width; ++c) {
                if (c > 0) {
                    if (p == end || *p != ' ') throw ParseError(source, lineno, "expected " + std::to_string(width) + " values");
                    ++p;
                }
                double v = 0;
                const auto res = std::from_chars(p, end, v, std::chars_format::hex);
                if (res.ec != std::errc()) throw ParseError(source, lineno, "bad value");
                t.values.push_back(v);
                p = res.ptr;
            }
            if (p != end) throw ParseError(source, lineno, "trailing characters");
        }
        f.tensors.push_back(std::move(t));
    }
    return f;
}

inline ParamsFile load_params(const std::filesystem::path& path)
{
    return parse_params(read_file(path), path.string());
}

/// Copies stored values into a model's parameters. Names, order and shapes
/// must agree exactly.
inline void apply_params(const std::vector<NamedTensor>& params, const ParamsFile& f)
{
    if (params.size() != f.tensors.size()) {
        throw DimensionError("params: file has " + std::to_string(f.tensors.size()) + " tensors, model has " +
                              std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& s = f.tensors[i];
        if (s.name != params[i].name) {
            throw DimensionError("params: tensor " + std::to_string(i) + " is '" + s.name + "', model expects '" +
                                  params[i].name + "'");
        }
        if (s.shape != params[i].tensor.shape()) {
            throw DimensionError("params: '" + s.name + "' has shape " + shape_string(s.shape) + ", model expects " +
                                  shape_string(params[i].tensor.shape()));
        }
        auto dst = Tensor(params[i].tensor).mutable_values();
        std::copy(s.values.begin(), s.values.end(), dst.begin());
    }
}

}  // namespace bam
