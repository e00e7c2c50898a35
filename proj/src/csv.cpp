#include "pfstab/csv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pfstab {

const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::UnknownSystemKind: return "UnknownSystemKind";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::MalformedRow: return "MalformedRow";
    case ErrorCode::ActionMismatch: return "ActionMismatch";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::SingularLambda: return "SingularLambda";
    case ErrorCode::AllStatesAttractor: return "AllStatesAttractor";
    case ErrorCode::MissingAction: return "MissingAction";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::Io: return "Io";
    case ErrorCode::SolverFailure: return "SolverFailure";
    case ErrorCode::VerificationFailed: return "VerificationFailed";
    }
    return "Unknown";
}

namespace csv {

std::string format_exact(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

std::string format_17(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

std::string trim(std::string_view text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(first, last - first + 1));
}

double parse_double(std::string_view text) {
    const std::string t = trim(text);
    double value = 0.0;
    const char* begin = t.data();
    const char* end = begin + t.size();
    if (!t.empty() && *begin == '+') ++begin;
    auto res = std::from_chars(begin, end, value);
    if (t.empty() || res.ec != std::errc{} || res.ptr != end)
        throw Error(ErrorCode::MalformedRow, "cannot parse number '" + t + "'");
    return value;
}

std::vector<std::string> split(std::string_view line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.emplace_back(trim(line.substr(start)));
            break;
        }
        out.emplace_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return out;
}

void write_matrix(const Matrix& m, const std::filesystem::path& path) {
    std::ostringstream out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out << ',';
            out << format_17(m(i, j));
        }
        out << '\n';
    }
    write_text(path, out.str());
}

Matrix read_matrix(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        std::vector<double> row;
        for (const auto& cell : split(line)) row.push_back(parse_double(cell));
        if (!rows.empty() && row.size() != rows.front().size())
            throw Error(ErrorCode::MalformedRow, path.string() + ":" + std::to_string(line_no) + " has " +
                                                     std::to_string(row.size()) + " columns, expected " +
                                                     std::to_string(rows.front().size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw Error(ErrorCode::EmptyDataset, path.string() + " is empty");
    Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

} // namespace csv
} // namespace pfstab
