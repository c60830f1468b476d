#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kdlab/errors.hpp"

// Append-only, flat CSV metrics log: one header line, then
// run_id,epoch,split,metric,value,wall_ms rows. Values print with %.17g so
// reruns of a deterministic config reproduce the file byte-for-byte except
// for the wall-clock column; the comparison helper strips that column.
// Non-finite values are written as the literal divergence marker.

namespace kdlab::metrics {

inline constexpr const char* kHeader = "run_id,epoch,split,metric,value,wall_ms";
inline constexpr const char* kDivergedMarker = "diverged";

struct MetricRecord {
    std::string run_id;
    int epoch = 0;
    std::string split;   // train | test | summary
    std::string metric;  // loss | accuracy | lr | ...
    std::string value;   // %.17g numeric text or the divergence marker
    double wall_ms = 0.0;
};

inline std::string format_value(double v) {
    if (!std::isfinite(v)) return kDivergedMarker;
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class Writer {
public:
    Writer() = default;
    explicit Writer(const std::string& path, std::string run_id)
        : os_(path), run_id_(std::move(run_id)) {
        if (!os_) throw ParseError("metrics: cannot open " + path + " for writing");
        os_ << kHeader << "\n";
    }

    void row(int epoch, const std::string& split, const std::string& metric, double value,
             double wall_ms = 0.0) {
        os_ << run_id_ << ',' << epoch << ',' << split << ',' << metric << ','
            << format_value(value) << ',' << format_value(wall_ms) << "\n";
    }

    void flush() { os_.flush(); }

private:
    std::ofstream os_;
    std::string run_id_;
};

inline std::vector<MetricRecord> read_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("metrics: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw ParseError("metrics: empty file " + path);
    if (line != kHeader) throw ParseError("metrics: unexpected header in " + path + ": " + line);
    std::vector<MetricRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        if (cols.size() != 6) throw ParseError("metrics: malformed row in " + path + ": " + line);
        MetricRecord r;
        r.run_id = cols[0];
        r.epoch = std::stoi(cols[1]);
        r.split = cols[2];
        r.metric = cols[3];
        r.value = cols[4];
        r.wall_ms = cols[5] == kDivergedMarker ? 0.0 : std::stod(cols[5]);
        out.push_back(std::move(r));
    }
    return out;
}

// Lookup of a summary metric as a double; throws if absent or non-numeric.
inline double summary_value(const std::vector<MetricRecord>& rows, const std::string& metric) {
    for (const auto& r : rows) {
        if (r.split == "summary" && r.metric == metric) {
            if (r.value == kDivergedMarker) throw DataError("metric '" + metric + "' is the divergence marker");
            return std::stod(r.value);
        }
    }
    throw DataError("metric '" + metric + "' not found");
}

// Byte-level equality except the wall-clock column.
inline bool equal_ignoring_wallclock(const std::string& path_a, const std::string& path_b) {
    const auto strip = [](const std::string& path) {
        std::ifstream is(path);
        if (!is) throw ParseError("metrics: cannot open " + path);
        std::string line, out;
        while (std::getline(is, line)) {
            const auto cut = line.rfind(',');
            out += line.substr(0, cut);
            out += '\n';
        }
        return out;
    };
    return strip(path_a) == strip(path_b);
}

}  // namespace kdlab::metrics
