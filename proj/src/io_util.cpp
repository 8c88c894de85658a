#include "ssmc/io_util.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace ssmc {

std::string ssmc_version() { return "0.1.0"; }

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open file for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, target);
}

void ensure_dir(const std::string& path) { fs::create_directories(path); }

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace

std::string csv_matrix(const std::string& corner, const std::vector<std::string>& col_labels,
                       const std::vector<std::string>& row_labels, const std::vector<std::vector<double>>& rows) {
    std::ostringstream os;
    os << csv_escape(corner);
    for (const auto& c : col_labels) os << "," << csv_escape(c);
    os << "\n";
    for (size_t r = 0; r < rows.size(); ++r) {
        os << csv_escape(r < row_labels.size() ? row_labels[r] : std::to_string(r));
        for (double v : rows[r]) os << "," << fmt_num(v);
        os << "\n";
    }
    return os.str();
}

namespace {

void heat_color(double t, int& r, int& g, int& b) {
    // -1 -> blue, 0 -> white, +1 -> red
    if (t < -1) t = -1;
    if (t > 1) t = 1;
    if (t < 0) {
        r = static_cast<int>(255 * (1 + t));
        g = static_cast<int>(255 * (1 + t));
        b = 255;
    } else {
        r = 255;
        g = static_cast<int>(255 * (1 - t));
        b = static_cast<int>(255 * (1 - t));
    }
}

}  // namespace

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& col_labels,
                        const std::vector<std::string>& row_labels, const std::vector<std::vector<double>>& rows,
                        double vmin, double vmax) {
    const int cell = 22, left = 110, top = 60, bottom = 70;
    const int nr = static_cast<int>(rows.size());
    const int nc = rows.empty() ? 0 : static_cast<int>(rows[0].size());
    const int w = left + nc * cell + 20, h = top + nr * cell + bottom;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    os << "<style>text{font-family:monospace;font-size:10px;}</style>\n";
    os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << title << "</text>\n";
    const double span = (vmax > vmin) ? (vmax - vmin) : 1.0;
    for (int r = 0; r < nr; ++r) {
        for (int c = 0; c < nc; ++c) {
            const double norm = 2.0 * (rows[static_cast<size_t>(r)][static_cast<size_t>(c)] - vmin) / span - 1.0;
            int cr, cg, cb;
            heat_color(norm, cr, cg, cb);
            os << "<rect x=\"" << left + c * cell << "\" y=\"" << top + r * cell << "\" width=\"" << cell
               << "\" height=\"" << cell << "\" fill=\"rgb(" << cr << "," << cg << "," << cb
               << ")\" stroke=\"#ccc\"/>\n";
        }
        os << "<text x=\"" << left - 6 << "\" y=\"" << top + r * cell + 15 << "\" text-anchor=\"end\">"
           << (r < static_cast<int>(row_labels.size()) ? row_labels[static_cast<size_t>(r)] : "") << "</text>\n";
    }
    for (int c = 0; c < nc; ++c) {
        os << "<text x=\"" << left + c * cell + 11 << "\" y=\"" << top + nr * cell + 12 << "\" text-anchor=\"start\""
           << " transform=\"rotate(60 " << left + c * cell + 11 << " " << top + nr * cell + 12 << ")\">"
           << (c < static_cast<int>(col_labels.size()) ? col_labels[static_cast<size_t>(c)] : "") << "</text>\n";
    }
    os << "<text x=\"" << left << "\" y=\"" << h - 8 << "\">scale: " << vmin << " (blue) .. " << vmax
       << " (red)</text>\n";
    os << "</svg>\n";
    return os.str();
}

}  // namespace ssmc
