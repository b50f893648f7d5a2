#pragma once

#include <charconv>
#include <string>

namespace bam {

/// Shortest decimal form that parses back to the same double.
inline void append_double(std::string& out, double v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, r.ptr);
}

inline std::string format_double(double v)
{
    std::string s;
    append_double(s, v);
    return s;
}

}  // namespace bam
