#pragma once

// Data files: a header `region,y,group,x1..xK` (one-hot loadings, groups
// 1-based) or `region,y,z1..zG,x1..xK` (dense loadings). Lines starting with
// '#' are comments; `# key=value` comments are returned as metadata.

#include "model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace gprobit {

struct CsvData {
    std::vector<RawRow> rows;
    std::map<std::string, std::string> meta;
    bool one_hot = true;
    std::size_t K = 0;
    std::size_t G = 0;  // dense width, or 0 in one-hot mode
};

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }
    return out;
}

inline double parse_double(const std::string& s, std::size_t line, const std::string& col) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("row " + std::to_string(line) + ": column '" + col + "' is not a number ('" + s + "')");
    }
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Parse a data file. Row numbers in errors count data rows from 1.
inline CsvData read_data_csv(std::istream& in) {
    CsvData out;
    std::string line;
    std::vector<std::string> header;
    std::size_t lineno = 0;
    std::size_t datarow = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq != std::string::npos) {
                auto key = line.substr(1, eq - 1);
                key.erase(0, key.find_first_not_of(' '));
                out.meta[key] = line.substr(eq + 1);
            }
            continue;
        }
        if (header.empty()) {
            header = detail::split_commas(line);
            if (header.size() < 3 || header[0] != "region" || header[1] != "y")
                throw DataError("header must start with 'region,y'");
            out.one_hot = header[2] == "group";
            for (std::size_t c = out.one_hot ? 3 : 2; c < header.size(); ++c) {
                if (header[c].size() > 1 && header[c][0] == 'z' && out.K == 0 && !out.one_hot) ++out.G;
                else if (header[c].size() > 1 && header[c][0] == 'x') ++out.K;
                else throw DataError("unexpected column '" + header[c] + "' in header");
            }
            if (out.K == 0) throw DataError("header has no covariate columns x1..xK");
            if (!out.one_hot && out.G == 0) throw DataError("header needs a 'group' column or z1..zG loadings");
            continue;
        }
        ++datarow;
        const auto f = detail::split_commas(line);
        if (f.size() != header.size())
            throw DataError("row " + std::to_string(datarow) + ": expected " + std::to_string(header.size()) +
                            " fields, found " + std::to_string(f.size()));
        RawRow r;
        r.line = datarow;
        const double reg = detail::parse_double(f[0], datarow, "region");
        if (reg != std::floor(reg)) throw DataError("row " + std::to_string(datarow) + ": region must be an integer");
        r.region = static_cast<std::int64_t>(reg);
        r.y = detail::parse_double(f[1], datarow, "y");
        std::size_t c = 2;
        if (out.one_hot) {
            const double g = detail::parse_double(f[2], datarow, "group");
            if (g != std::floor(g)) throw DataError("row " + std::to_string(datarow) + ": group must be an integer");
            r.group = static_cast<int>(g);
            c = 3;
        } else {
            for (std::size_t k = 0; k < out.G; ++k, ++c) r.z.push_back(detail::parse_double(f[c], datarow, header[c]));
        }
        for (; c < f.size(); ++c) r.x.push_back(detail::parse_double(f[c], datarow, header[c]));
        out.rows.push_back(std::move(r));
    }
    if (header.empty()) throw DataError("file has no header");
    if (out.rows.empty()) throw DataError("file has no data rows");
    return out;
}

inline CsvData read_data_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::ios_base::failure("cannot open '" + path + "'");
    return read_data_csv(f);
}

/// Build the dataset; a `G` metadata entry fixes the group count in one-hot mode.
inline Dataset to_dataset(const CsvData& csv, std::optional<int> n_groups = std::nullopt) {
    if (!n_groups && csv.meta.count("G")) n_groups = std::stoi(csv.meta.at("G"));
    return validate_dataset(csv.rows, csv.one_hot ? n_groups : std::nullopt);
}

inline void write_data_csv(std::ostream& out, const Dataset& d, const std::vector<std::string>& comments = {}) {
    for (const auto& c : comments) out << "# " << c << "\n";
    const bool one_hot = d.one_hot();
    out << "region,y";
    if (one_hot) out << ",group";
    else
        for (Index g = 0; g < d.G; ++g) out << ",z" << g + 1;
    for (Index k = 0; k < d.K; ++k) out << ",x" << k + 1;
    out << "\n";
    for (const auto& b : d.regions) {
        for (Index i = 0; i < b.size(); ++i) {
            out << b.region_id << "," << b.y(i);
            if (one_hot) out << "," << (*b.group_index)[static_cast<std::size_t>(i)] + 1;
            else
                for (Index g = 0; g < d.G; ++g) out << "," << detail::fmt_double(b.Z(i, g));
            for (Index k = 0; k < d.K; ++k) out << "," << detail::fmt_double(b.X(i, k));
            out << "\n";
        }
    }
}

}  // namespace gprobit
