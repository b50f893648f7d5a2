#pragma once

// On-disk graph datasets.
//
// A dataset directory holds four UTF-8 tab-separated files and a manifest:
//   features.tsv  node_id <TAB> x_1 ... <TAB> x_F      (one line per node)
//   edges.tsv     u <TAB> v                            (one undirected edge per line)
//   labels.tsv    node_id <TAB> label
//   splits.tsv    node_id <TAB> train|val|test|none
//   manifest.json {"format", "name", "row_normalize", "files": {kind: {"path", "sha256"}}}
// Node ids are dense 0..N-1. Reals are written in shortest round-trip form.

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "bam/error.hpp"
#include "bam/format.hpp"
#include "bam/graph.hpp"

namespace bam {

inline constexpr const char* kGraphFormat = "bam-graph v1";

// ---------------------------------------------------------------------------
// Checksums

inline std::string sha256_hex(std::string_view bytes)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256: digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

inline std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------
// Line parsing

namespace detail {

struct LineReader
{
    std::string file;
    std::string_view text;
    std::size_t pos = 0;
    std::size_t line_no = 0;

    bool next(std::string_view& line)
    {
        if (pos >= text.size()) return false;
        const std::size_t end = text.find('\n', pos);
        const std::size_t stop = end == std::string_view::npos ? text.size() : end;
        line = text.substr(pos, stop - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = end == std::string_view::npos ? text.size() : end + 1;
        ++line_no;
        return true;
    }

    [[noreturn]] void fail(const std::string& what) const { throw ParseError(file, line_no, what); }
};

inline std::vector<std::string_view> split_tabs(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

template <class T>
T parse_number(const LineReader& r, std::string_view field, const char* what)
{
    T v{};
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        r.fail(std::string("malformed ") + what + " '" + std::string(field) + "'");
    }
    return v;
}

inline std::size_t parse_node(const LineReader& r, std::string_view field, std::size_t n)
{
    const auto id = parse_number<std::size_t>(r, field, "node id");
    if (n != 0 && id >= n) r.fail("node id " + std::to_string(id) + " out of range");
    return id;
}

inline SplitTag parse_split(const LineReader& r, std::string_view s)
{
    if (s == "train") return SplitTag::train;
    if (s == "val") return SplitTag::val;
    if (s == "test") return SplitTag::test;
    if (s == "none") return SplitTag::none;
    r.fail("unknown split tag '" + std::string(s) + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Manifest

struct FileEntry
{
    std::string path;  // relative to the manifest directory
    std::string sha256;
};

struct GraphDatasetManifest
{
    std::string name;
    std::filesystem::path directory;
    bool row_normalize = true;
    std::map<std::string, FileEntry> files;  // features, edges, labels, splits

    std::filesystem::path path_of(const std::string& kind) const
    {
        const auto it = files.find(kind);
        if (it == files.end()) throw ValidationError("manifest: no '" + kind + "' file listed");
        return directory / it->second.path;
    }
};

inline GraphDatasetManifest read_manifest(const std::filesystem::path& manifest_path)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    GraphDatasetManifest m;
    try {
        if (j.at("format").get<std::string>() != kGraphFormat) {
            throw ValidationError("manifest: unsupported format '" + j.at("format").get<std::string>() + "'");
        }
        m.name = j.at("name").get<std::string>();
        m.row_normalize = j.at("row_normalize").get<bool>();
        for (const char* kind : {"features", "edges", "labels", "splits"}) {
            const auto& f = j.at("files").at(kind);
            m.files[kind] = {f.at("path").get<std::string>(), f.at("sha256").get<std::string>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path.string() + ": " + e.what());
    }
    m.directory = manifest_path.parent_path();
    return m;
}

inline std::string manifest_json(const GraphDatasetManifest& m)
{
    nlohmann::ordered_json j;
    j["format"] = kGraphFormat;
    j["name"] = m.name;
    j["row_normalize"] = m.row_normalize;
    for (const auto& [kind, f] : m.files) j["files"][kind] = {{"path", f.path}, {"sha256", f.sha256}};
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Reference statistics of the public citation benchmarks

struct GraphStats
{
    std::size_t nodes, features, classes, train, val, test;
};

inline std::optional<GraphStats> reference_stats(const std::string& name)
{
    if (name == "cora") return GraphStats{2708, 1433, 7, 140, 500, 1000};
    if (name == "citeseer") return GraphStats{3327, 3703, 6, 120, 500, 1000};
    if (name == "pubmed") return GraphStats{19717, 500, 3, 60, 500, 1000};
    return std::nullopt;
}

inline void check_reference_stats(const GraphDataset& g)
{
    const auto ref = reference_stats(g.name);
    if (!ref) return;
    const auto fail = [&](const char* what, std::size_t got, std::size_t want) {
        throw ValidationError("dataset '" + g.name + "': " + what + " is " + std::to_string(got) +
                              ", expected " + std::to_string(want));
    };
    if (g.num_nodes != ref->nodes) fail("node count", g.num_nodes, ref->nodes);
    if (g.num_features != ref->features) fail("feature count", g.num_features, ref->features);
    if (g.num_classes() != ref->classes) fail("class count", g.num_classes(), ref->classes);
    if (g.nodes_in(SplitTag::train).size() != ref->train) fail("train split", g.nodes_in(SplitTag::train).size(), ref->train);
    if (g.nodes_in(SplitTag::val).size() != ref->val) fail("val split", g.nodes_in(SplitTag::val).size(), ref->val);
    if (g.nodes_in(SplitTag::test).size() != ref->test) fail("test split", g.nodes_in(SplitTag::test).size(), ref->test);
}

// ---------------------------------------------------------------------------
// Load and write

/// Verifies checksums, parses the four files and validates the result.
inline GraphDataset load_graph(const GraphDatasetManifest& m)
{
    std::map<std::string, std::string> text;
    for (const auto& [kind, entry] : m.files) {
        const auto path = m.directory / entry.path;
        text[kind] = read_file(path);
        const auto actual = sha256_hex(text[kind]);
        if (actual != entry.sha256) {
            throw IntegrityError("checksum mismatch for " + path.string() + ": manifest " + entry.sha256 +
                                 ", file " + actual);
        }
    }
    GraphDataset g;
    g.name = m.name;
    g.row_normalize = m.row_normalize;

    {
        detail::LineReader r{m.path_of("features").string(), text.at("features")};
        std::vector<std::vector<double>> rows;
        std::vector<std::uint8_t> seen;
        std::string_view line;
        while (r.next(line)) {
            if (line.empty()) r.fail("empty line");
            const auto fields = detail::split_tabs(line);
            if (fields.size() < 2) r.fail("expected a node id and at least one feature");
            const std::size_t id = detail::parse_node(r, fields[0], 0);
            if (g.num_features == 0) g.num_features = fields.size() - 1;
            if (fields.size() - 1 != g.num_features) {
                r.fail("expected " + std::to_string(g.num_features) + " features, found " +
                       std::to_string(fields.size() - 1));
            }
            if (id >= rows.size()) {
                rows.resize(id + 1);
                seen.resize(id + 1, 0);
            }
            if (seen[id]) r.fail("duplicate node id " + std::to_string(id));
            seen[id] = 1;
            auto& row = rows[id];
            row.reserve(g.num_features);
            for (std::size_t f = 1; f < fields.size(); ++f) row.push_back(detail::parse_number<double>(r, fields[f], "feature"));
        }
        if (rows.empty()) r.fail("no nodes");
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i]) throw ParseError(r.file, r.line_no, "node id " + std::to_string(i) + " missing; ids must be dense");
        g.num_nodes = rows.size();
        g.features.reserve(g.num_nodes * g.num_features);
        for (const auto& row : rows) g.features.insert(g.features.end(), row.begin(), row.end());
    }
    {
        detail::LineReader r{m.path_of("edges").string(), text.at("edges")};
        std::string_view line;
        while (r.next(line)) {
            const auto fields = detail::split_tabs(line);
            if (fields.size() != 2) r.fail("expected two node ids");
            g.edges.emplace_back(detail::parse_node(r, fields[0], g.num_nodes),
                                 detail::parse_node(r, fields[1], g.num_nodes));
        }
    }
    const auto per_node = [&](const char* kind, auto parse_value, auto& out, auto fill) {
        out.assign(g.num_nodes, fill);
        std::vector<std::uint8_t> seen(g.num_nodes, 0);
        detail::LineReader r{m.path_of(kind).string(), text.at(kind)};
        std::string_view line;
        while (r.next(line)) {
            const auto fields = detail::split_tabs(line);
            if (fields.size() != 2) r.fail("expected a node id and a value");
            const std::size_t id = detail::parse_node(r, fields[0], g.num_nodes);
            if (seen[id]) r.fail("duplicate node id " + std::to_string(id));
            seen[id] = 1;
            out[id] = parse_value(r, fields[1]);
        }
        for (std::size_t i = 0; i < g.num_nodes; ++i)
            if (!seen[i]) throw ParseError(r.file, r.line_no, std::string(kind) + ": node " + std::to_string(i) + " missing");
    };
    per_node("labels", [](const detail::LineReader& r, std::string_view s) { return detail::parse_number<int>(r, s, "label"); },
             g.labels, -1);
    per_node("splits", [](const detail::LineReader& r, std::string_view s) { return detail::parse_split(r, s); }, g.split,
             SplitTag::none);

    g.validate();
    check_reference_stats(g);
    return g;
}

inline GraphDataset load_graph(const std::filesystem::path& manifest_path)
{
    return load_graph(read_manifest(manifest_path));
}

/// Writes the dataset and its manifest into `dir`, returning the manifest.
inline GraphDatasetManifest write_graph(const GraphDataset& g, const std::filesystem::path& dir)
{
    g.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    std::map<std::string, std::string> text;
    std::string& feat = text["features"];
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
        feat += std::to_string(i);
        for (std::size_t f = 0; f < g.num_features; ++f) {
            feat += '\t';
            append_double(feat, g.features[i * g.num_features + f]);
        }
        feat += '\n';
    }
    std::string& edges = text["edges"];
    for (const auto& [u, v] : g.edges) edges += std::to_string(u) + '\t' + std::to_string(v) + '\n';
    std::string& labels = text["labels"];
    for (std::size_t i = 0; i < g.num_nodes; ++i) labels += std::to_string(i) + '\t' + std::to_string(g.labels[i]) + '\n';
    std::string& splits = text["splits"];
    for (std::size_t i = 0; i < g.num_nodes; ++i) splits += std::to_string(i) + '\t' + to_string(g.split[i]) + '\n';

    GraphDatasetManifest m;
    m.name = g.name;
    m.directory = dir;
    m.row_normalize = g.row_normalize;
    for (const auto& [kind, body] : text) {
        const std::string file = kind + ".tsv";
        write_file(dir / file, body);
        m.files[kind] = {file, sha256_hex(body)};
    }
    write_file(dir / "manifest.json", manifest_json(m));
    return m;
}

}  // namespace bam
