#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmc {

// Invalid user-facing configuration (exit code 2 at the CLI).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string ssmc_version();

std::string read_file(const std::string& path);

// Writes via a temp file in the same directory plus rename, so readers never
// observe a partially written artifact.
void atomic_write_file(const std::string& path, const std::string& bytes);

void ensure_dir(const std::string& path);

// FNV-1a over the canonical config string; good enough to key manifests.
std::string fnv1a_hex(const std::string& bytes);

// CSV matrix with a corner label, column labels, and one labelled row per line.
std::string csv_matrix(const std::string& corner, const std::vector<std::string>& col_labels,
                       const std::vector<std::string>& row_labels, const std::vector<std::vector<double>>& rows);

// Standalone SVG heatmap; values are mapped onto a diverging blue-white-red
// scale over [vmin, vmax].
std::string svg_heatmap(const std::string& title, const std::vector<std::string>& col_labels,
                        const std::vector<std::string>& row_labels, const std::vector<std::vector<double>>& rows,
                        double vmin, double vmax);

}  // namespace ssmc
