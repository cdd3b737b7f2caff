#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "anchorudf/common.hpp"

namespace audf {

// Binary little-endian PLY with double x/y/z vertex properties. The writer
// emits a fixed header, so save -> load -> save round-trips bitwise.
inline void save_ply(const std::vector<Vec3>& points, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open PLY for writing: " + path);
    os << "ply\n"
       << "format binary_little_endian 1.0\n"
       << "element vertex " << points.size() << "\n"
       << "property double x\n"
       << "property double y\n"
       << "property double z\n"
       << "end_header\n";
    for (const Vec3& p : points) {
        write_f64_le(os, p.x);
        write_f64_le(os, p.y);
        write_f64_le(os, p.z);
    }
    if (!os) throw DataError("failed writing PLY: " + path);
}

inline std::vector<Vec3> load_ply(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open PLY: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "ply") throw DataError("not a PLY file: " + path);
    std::size_t count = 0;
    bool header_done = false;
    bool binary_le = false;
    std::vector<std::string> properties;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "comment") continue;
        if (tag == "format") {
            std::string fmt;
            ls >> fmt;
            binary_le = fmt == "binary_little_endian";
        } else if (tag == "element") {
            std::string kind;
            ls >> kind >> count;
            if (kind != "vertex") throw DataError("PLY: unsupported element '" + kind + "'");
        } else if (tag == "property") {
            std::string type, name;
            ls >> type >> name;
            if (type != "double") throw DataError("PLY: unsupported property type " + type);
            properties.push_back(name);
        } else if (tag == "end_header") {
            header_done = true;
            break;
        } else {
            throw DataError("PLY: unexpected header line '" + line + "'");
        }
    }
    if (!header_done) throw DataError("PLY: truncated header in " + path);
    if (!binary_le) throw DataError("PLY: only binary_little_endian is supported");
    if (properties != std::vector<std::string>{"x", "y", "z"})
        throw DataError("PLY: expected double x/y/z vertex properties");
    std::vector<Vec3> points(count);
    for (auto& p : points) {
        p.x = read_f64_le(is);
        p.y = read_f64_le(is);
        p.z = read_f64_le(is);
    }
    return points;
}

}  // namespace audf
