#pragma once

// Paired snow/clean datasets on disk: <name>_snow.ppm next to <name>_gt.ppm
// plus a manifest.txt recording the pair names and the generator settings
// as key=value lines. The manifest order is the canonical dataset order.

#include "snowsynth.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace mspf {

struct DatasetEntry {
    std::string name;
    std::string snow_path;
    std::string gt_path;
};

namespace detail {

inline std::string join_path(const std::string& dir, const std::string& leaf) {
    if (dir.empty()) return leaf;
    if (dir.back() == '/') return dir + leaf;
    return dir + "/" + leaf;
}

inline std::string range_kv(double lo, double hi) {
    std::ostringstream o;
    o << lo << "," << hi;
    return o.str();
}

}  // namespace detail

inline void write_manifest(const std::string& dir, const std::vector<std::string>& names,
                           const SnowParams& p) {
    const std::string path = detail::join_path(dir, "manifest.txt");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot create manifest: " + path);
    for (const auto& n : names) out << "pair=" << n << "\n";
    out << "snow.density=" << p.mask_density << "\n";
    out << "snow.flake_radius=" << detail::range_kv(p.flake_radius_lo, p.flake_radius_hi) << "\n";
    out << "snow.streak_length=" << detail::range_kv(p.streak_len_lo, p.streak_len_hi) << "\n";
    out << "snow.streak_angle=" << detail::range_kv(p.streak_angle_lo, p.streak_angle_hi) << "\n";
    out << "snow.chroma=" << detail::range_kv(p.chroma_lo, p.chroma_hi) << "\n";
    out << "snow.transmission=" << detail::range_kv(p.t_lo, p.t_hi) << "\n";
    out << "snow.atmospheric=" << detail::range_kv(p.a_lo, p.a_hi) << "\n";
    out << "snow.streak_fraction=" << p.streak_fraction << "\n";
    out << "snow.seed=" << p.seed << "\n";
    if (!out) throw IoError("failed writing manifest: " + path);
}

// Reads the manifest and resolves pair paths. Pairs keep manifest order;
// generator settings other than pair lines are ignored here.
inline std::vector<DatasetEntry> list_dataset(const std::string& dir) {
    const std::string path = detail::join_path(dir, "manifest.txt");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::vector<DatasetEntry> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("pair=", 0) != 0) continue;
        const std::string name = line.substr(5);
        if (name.empty()) continue;
        out.push_back({name, detail::join_path(dir, name + "_snow.ppm"),
                       detail::join_path(dir, name + "_gt.ppm")});
    }
    return out;
}

}  // namespace mspf
