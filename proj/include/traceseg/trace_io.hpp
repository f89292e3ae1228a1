#pragma once

// Text serialization for traced trajectories: one line per trajectory,
//
//   stage=<int> seed_energy=<float> n=<count> <x0>,<y0> <x1>,<y1> ...
//
// Coordinates and energies print with enough digits to reproduce the float
// exactly on parse. The sampled feature rows are a product of the forward
// pass, not part of the geometric record, so they are not serialized.

#include <cstdio>
#include <sstream>
#include <string>

#include "traceseg/trajectory.hpp"

namespace traceseg {

inline std::string fmt_float(float v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    return buf;
}

template <typename T>
std::string trajectory_line(const Trajectory<T>& tr) {
    std::ostringstream os;
    os << "stage=" << tr.stage << " seed_energy=" << fmt_float(static_cast<float>(tr.seed_energy))
       << " n=" << tr.points.size();
    for (const auto& p : tr.points)
        os << ' ' << fmt_float(static_cast<float>(p.x)) << ',' << fmt_float(static_cast<float>(p.y));
    return os.str();
}

inline Trajectory<float> parse_trajectory_line(const std::string& line) {
    std::istringstream ss(line);
    std::string tok;
    Trajectory<float> tr;
    auto field = [&](const std::string& key) {
        if (!(ss >> tok) || tok.rfind(key + "=", 0) != 0)
            throw DataError("trajectory line missing '" + key + "=': " + line);
        return tok.substr(key.size() + 1);
    };
    tr.stage = std::stoi(field("stage"));
    tr.seed_energy = std::stof(field("seed_energy"));
    const int n = std::stoi(field("n"));
    if (n < 0) throw DataError("negative point count in trajectory line: " + line);
    for (int i = 0; i < n; ++i) {
        if (!(ss >> tok)) throw DataError("trajectory line promises " + std::to_string(n) +
                                          " points but ends early: " + line);
        const auto comma = tok.find(',');
        if (comma == std::string::npos)
            throw DataError("trajectory point '" + tok + "' is not 'x,y'");
        Vec2<float> p;
        p.x = std::stof(tok.substr(0, comma));
        p.y = std::stof(tok.substr(comma + 1));
        tr.points.push_back(p);
    }
    if (ss >> tok) throw DataError("trailing data after trajectory points: " + line);
    return tr;
}

}  // namespace traceseg
