#ifndef PFSTAB_CSV_HPP
#define PFSTAB_CSV_HPP

#include "pfstab/common.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pfstab::csv {

/// Shortest decimal text that parses back to the same double.
std::string format_exact(double value);
/// Fixed 17 significant digits, used for persisted matrices.
std::string format_17(double value);
double parse_double(std::string_view text);
std::vector<std::string> split(std::string_view line, char sep = ',');
std::string trim(std::string_view text);

void write_matrix(const Matrix& m, const std::filesystem::path& path);
/// Throws MalformedRow on ragged rows or unparsable cells, EmptyDataset on an empty file.
Matrix read_matrix(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

} // namespace pfstab::csv

#endif // PFSTAB_CSV_HPP
