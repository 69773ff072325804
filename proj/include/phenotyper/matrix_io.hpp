#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "phenotyper/common.hpp"

namespace phenotyper {

inline std::string matrix_to_csv(const Eigen::MatrixXd& m) {
    std::string out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out += ',';
            out += format_double(m(i, j));
        }
        out += '\n';
    }
    return out;
}

inline Eigen::MatrixXd matrix_from_csv(const std::string& text) {
    std::vector<std::vector<double>> rows;
    for (const auto& line : split(text, '\n')) {
        const auto t = trim(line);
        if (t.empty()) continue;
        std::vector<double> row;
        for (const auto& cell : split(t, ',')) row.push_back(parse_double(cell));
        if (!rows.empty() && rows.front().size() != row.size())
            throw IngestError("matrix CSV: ragged rows");
        rows.push_back(std::move(row));
    }
    Eigen::MatrixXd m(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

inline void save_matrix(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
    write_file(path, matrix_to_csv(m));
}

inline Eigen::MatrixXd load_matrix(const std::filesystem::path& path) {
    return matrix_from_csv(read_file(path));
}

/// Embedding CSV: one row per entity, "code,v0,...,v{d-1}".
inline std::string labeled_matrix_to_csv(const Eigen::MatrixXd& m,
                                         const std::vector<std::string>& labels) {
    if (static_cast<std::size_t>(m.rows()) != labels.size())
        throw Error("labeled_matrix_to_csv: label count mismatch");
    std::string out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        out += labels[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            out += ',';
            out += format_double(m(i, j));
        }
        out += '\n';
    }
    return out;
}

}  // namespace phenotyper
