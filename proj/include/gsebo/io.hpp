#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"  // nlohmann/json (vendor/)

#include "gsebo/error.hpp"
#include "gsebo/graph.hpp"
#include "gsebo/matrix.hpp"
#include "gsebo/models.hpp"

namespace gsebo {

namespace fs = std::filesystem;

namespace detail {

inline std::ifstream open_in(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw InputError(p.string() + ": cannot open");
    return in;
}

inline void write_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError(p.string() + ": cannot open for writing");
    out << content;
    if (!out) throw InputError(p.string() + ": write failed");
}

inline nlohmann::json read_json(const fs::path& p) {
    auto in = open_in(p);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(p.string() + ": invalid JSON: " + e.what());
    }
}

[[noreturn]] inline void fail_at(const fs::path& p, std::size_t line, const std::string& what) {
    throw InputError(p.string() + ":" + std::to_string(line) + ": " + what);
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, '\t')) out.push_back(cur);
    if (!line.empty() && line.back() == '\t') out.emplace_back();
    return out;
}

inline long long parse_int(const std::string& s, const fs::path& p, std::size_t line) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &used);
    } catch (const std::exception&) {
        fail_at(p, line, "expected an integer, got '" + s + "'");
    }
    if (used != s.size()) fail_at(p, line, "expected an integer, got '" + s + "'");
    return v;
}

inline double parse_real(const std::string& s, const fs::path& p, std::size_t line) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        fail_at(p, line, "expected a real number, got '" + s + "'");
    }
    if (used != s.size()) fail_at(p, line, "expected a real number, got '" + s + "'");
    if (!std::isfinite(v)) fail_at(p, line, "non-finite feature value");
    return v;
}

inline std::string real17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T meta_field(const nlohmann::json& meta, const char* key, const fs::path& p) {
    if (!meta.contains(key)) throw InputError(p.string() + ": missing field '" + key + "'");
    try {
        return meta.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw InputError(p.string() + ": field '" + key + "' has the wrong type");
    }
}

inline std::vector<Index> split_part(const nlohmann::json& s, const char* key, std::size_t n, const fs::path& p) {
    if (!s.contains(key) || !s.at(key).is_array()) throw InputError(p.string() + ": missing array '" + key + "'");
    std::vector<Index> out;
    for (const auto& v : s.at(key)) {
        if (!v.is_number_integer()) throw InputError(p.string() + ": non-integer index in '" + key + "'");
        const auto i = v.get<long long>();
        if (i < 0 || static_cast<std::size_t>(i) >= n)
            throw InputError(p.string() + ": index " + std::to_string(i) + " in '" + key + "' out of range");
        out.push_back(static_cast<Index>(i));
    }
    return out;
}

}  // namespace detail

/// Reads a bundle directory (meta.json, edges.tsv, features.tsv, labels.tsv,
/// split.json). Any inconsistency is an InputError naming the file and line;
/// nothing is repaired.
inline DatasetBundle load_bundle(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw InputError(dir.string() + ": not a directory");
    const auto meta_path = dir / "meta.json";
    const auto meta = detail::read_json(meta_path);
    const auto n = detail::meta_field<long long>(meta, "n", meta_path);
    const auto num_edges = detail::meta_field<long long>(meta, "num_edges", meta_path);
    const auto num_classes = detail::meta_field<long long>(meta, "num_classes", meta_path);
    const auto feature_dim = detail::meta_field<long long>(meta, "feature_dim", meta_path);
    if (n <= 0 || num_edges < 0 || num_classes <= 0 || feature_dim <= 0)
        throw InputError(meta_path.string() + ": counts must be positive");

    DatasetBundle b;
    b.name = detail::meta_field<std::string>(meta, "name", meta_path);
    b.num_classes = static_cast<int>(num_classes);

    {
        const auto p = dir / "edges.tsv";
        auto in = detail::open_in(p);
        std::vector<Edge> edges;
        std::string line;
        std::size_t ln = 0;
        while (std::getline(in, line)) {
            ++ln;
            const auto f = detail::split_tabs(line);
            if (f.size() != 2) detail::fail_at(p, ln, "expected two tab-separated node indices");
            const auto u = detail::parse_int(f[0], p, ln), v = detail::parse_int(f[1], p, ln);
            if (u < 0 || v < 0 || u >= n || v >= n) detail::fail_at(p, ln, "node index out of range");
            if (u == v) detail::fail_at(p, ln, "self loop");
            if (u > v) detail::fail_at(p, ln, "edge must be written with u < v");
            if (!edges.empty() && !(edges.back() < Edge{static_cast<Index>(u), static_cast<Index>(v)}))
                detail::fail_at(p, ln, "edges must be sorted and unique");
            edges.push_back({static_cast<Index>(u), static_cast<Index>(v)});
        }
        if (static_cast<long long>(edges.size()) != num_edges)
            throw InputError(p.string() + ": " + std::to_string(edges.size()) + " edges but meta.json says " +
                             std::to_string(num_edges));
        b.graph = Graph::from_edges(static_cast<std::size_t>(n), edges);
    }
    {
        const auto p = dir / "features.tsv";
        auto in = detail::open_in(p);
        b.features = DenseMatrix(static_cast<std::size_t>(n), static_cast<std::size_t>(feature_dim));
        std::string line;
        std::size_t ln = 0;
        while (std::getline(in, line)) {
            ++ln;
            if (static_cast<long long>(ln) > n) detail::fail_at(p, ln, "more feature rows than nodes");
            const auto f = detail::split_tabs(line);
            if (static_cast<long long>(f.size()) != feature_dim)
                detail::fail_at(p, ln, "expected " + std::to_string(feature_dim) + " columns, got " + std::to_string(f.size()));
            for (std::size_t c = 0; c < f.size(); ++c) b.features(ln - 1, c) = detail::parse_real(f[c], p, ln);
        }
        if (static_cast<long long>(ln) != n)
            throw InputError(p.string() + ": " + std::to_string(ln) + " rows but meta.json says n=" + std::to_string(n));
    }
    {
        const auto p = dir / "labels.tsv";
        auto in = detail::open_in(p);
        std::string line;
        std::size_t ln = 0;
        while (std::getline(in, line)) {
            ++ln;
            const auto y = detail::parse_int(line, p, ln);
            if (y < 0 || y >= num_classes) detail::fail_at(p, ln, "label out of range [0, num_classes)");
            b.labels.push_back(static_cast<int>(y));
        }
        if (static_cast<long long>(b.labels.size()) != n)
            throw InputError(p.string() + ": " + std::to_string(b.labels.size()) + " labels but meta.json says n=" +
                             std::to_string(n));
    }
    {
        const auto p = dir / "split.json";
        const auto s = detail::read_json(p);
        b.split.train = detail::split_part(s, "train", static_cast<std::size_t>(n), p);
        b.split.val = detail::split_part(s, "val", static_cast<std::size_t>(n), p);
        b.split.test = detail::split_part(s, "test", static_cast<std::size_t>(n), p);
        try {
            b.split.validate(static_cast<std::size_t>(n));
        } catch (const ContractError& e) {
            throw InputError(p.string() + ": " + e.what());
        }
    }
    return b;
}

/// Canonical serialization: sorted u < v edges, 17 significant digits for
/// features, so equal bundles produce byte-identical directories.
inline void save_bundle(const DatasetBundle& b, const fs::path& dir) {
    b.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw InputError(dir.string() + ": cannot create directory: " + ec.message());

    const auto edges = b.graph.edges();
    nlohmann::ordered_json meta;
    meta["n"] = b.n();
    meta["num_edges"] = edges.size();
    meta["num_classes"] = b.num_classes;
    meta["feature_dim"] = b.features.cols();
    meta["name"] = b.name;
    detail::write_file(dir / "meta.json", meta.dump(2) + "\n");

    std::string es;
    for (const auto& e : edges) es += std::to_string(e.u) + "\t" + std::to_string(e.v) + "\n";
    detail::write_file(dir / "edges.tsv", es);

    std::string fs_;
    for (std::size_t i = 0; i < b.features.rows(); ++i) {
        for (std::size_t c = 0; c < b.features.cols(); ++c) {
            if (c) fs_ += '\t';
            fs_ += detail::real17(b.features(i, c));
        }
        fs_ += '\n';
    }
    detail::write_file(dir / "features.tsv", fs_);

    std::string ls;
    for (int y : b.labels) ls += std::to_string(y) + "\n";
    detail::write_file(dir / "labels.tsv", ls);

    nlohmann::ordered_json split;
    split["train"] = b.split.train;
    split["val"] = b.split.val;
    split["test"] = b.split.test;
    detail::write_file(dir / "split.json", split.dump() + "\n");
}

inline constexpr const char* kZReportHeader = "src\tdst\tinit_weight\traw_z\tstrength\tsame_class";

/// One row per stored entry of the propagation pattern (heads in sequence for
/// multi-head GAT): src, dst, initial strength, raw Z, clamp01(Z), same-class flag.
inline std::string z_report_tsv(const ModelState& st, const DatasetBundle& b) {
    const auto& prop = *st.spec.prop;
    const auto& p = *prop.pattern;
    require(b.labels.size() == p.n, "export_z_report: bundle does not match model");
    require(st.z.values.size() == st.spec.z_size(), "export_z_report: strengths not aligned to pattern");
    std::string out = std::string(kZReportHeader) + "\n";
    for (std::size_t h = 0; h < st.spec.num_heads(); ++h)
        for (std::size_t i = 0; i < p.n; ++i)
            for (std::size_t e = p.row_begin(i); e < p.row_end(i); ++e) {
                const std::size_t j = p.col_indices[e];
                const double raw = st.z.values[h * p.nnz() + e];
                out += std::to_string(i) + "\t" + std::to_string(j) + "\t" + detail::real17(prop.init[e]) + "\t" +
                       detail::real17(raw) + "\t" + detail::real17(clamp01(raw)) + "\t" +
                       (b.labels[i] == b.labels[j] ? "1" : "0") + "\n";
            }
    return out;
}

inline void export_z_report(const ModelState& st, const DatasetBundle& b, const fs::path& path) {
    detail::write_file(path, z_report_tsv(st, b));
}

/// JSON snapshot of a trained model: configuration, weights and raw strengths.
inline void save_model(const ModelState& st, const fs::path& path) {
    nlohmann::ordered_json j;
    j["backbone"] = to_string(st.spec.config.backbone);
    j["mode"] = st.spec.mode == Mode::gsebo ? "gsebo" : "vanilla";
    j["layers"] = st.spec.config.layers;
    j["hidden"] = st.spec.config.hidden;
    j["heads"] = st.spec.config.heads;
    j["dropout"] = st.spec.config.dropout;
    auto& ws = j["weights"] = nlohmann::ordered_json::array();
    for (const auto& m : st.weights.mats) {
        nlohmann::ordered_json w;
        w["rows"] = m.rows();
        w["cols"] = m.cols();
        w["values"] = m.values();
        ws.push_back(std::move(w));
    }
    j["z"] = st.z.values;
    detail::write_file(path, j.dump() + "\n");
}

/// Rebuilds a snapshot against the bundle it was trained on.
inline ModelState load_model(const fs::path& path, const DatasetBundle& b) {
    const auto j = detail::read_json(path);
    ModelState st;
    try {
        BackboneConfig cfg;
        cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
        cfg.layers = j.at("layers").get<int>();
        cfg.hidden = j.at("hidden").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.dropout = j.at("dropout").get<double>();
        const auto mode = j.at("mode").get<std::string>() == "vanilla" ? Mode::vanilla : Mode::gsebo;
        st.spec = make_spec(b, cfg, mode);
        for (const auto& w : j.at("weights"))
            st.weights.mats.emplace_back(w.at("rows").get<std::size_t>(), w.at("cols").get<std::size_t>(),
                                         w.at("values").get<std::vector<double>>());
        st.z.values = j.at("z").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": malformed model snapshot: " + e.what());
    } catch (const ContractError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    const auto shapes = weight_shapes(st.spec);
    bool ok = shapes.size() == st.weights.mats.size() && st.z.values.size() == st.spec.z_size();
    for (std::size_t i = 0; ok && i < shapes.size(); ++i)
        ok = st.weights.mats[i].rows() == shapes[i].first && st.weights.mats[i].cols() == shapes[i].second;
    if (!ok) throw InputError(path.string() + ": snapshot does not match the bundle's dimensions");
    return st;
}

}  // namespace gsebo
