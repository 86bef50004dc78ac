#pragma once

// Versioned JSON serialization for model and solver artifacts. Every file
// is a self-describing object {"format": "...", "version": n, ...} with
// matrices stored as {"rows", "cols", "order", "data"}. Non-finite values
// are encoded as strings ("inf", "-inf") since JSON has no literal for
// them.

#include <lkc/common.hpp>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace lkc {

using json = nlohmann::json;

inline json matrix_to_json(const Mat& m, const std::string& order = "row") {
  json data = json::array();
  if (order == "row") {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  } else {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) data.push_back(m(i, j));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"order", order}, {"data", data}};
}

inline Mat matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const std::string order = j.value("order", "row");
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw IoError("matrix payload size mismatch");
  Mat m(rows, cols);
  std::size_t k = 0;
  if (order == "row") {
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[k++].get<double>();
  } else {
    for (Eigen::Index j2 = 0; j2 < cols; ++j2)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j2) = data[k++].get<double>();
  }
  return m;
}

inline json vector_to_json(const Vec& v) {
  json data = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double x = v(i);
    if (std::isfinite(x))
      data.push_back(x);
    else
      data.push_back(x > 0 ? "inf" : "-inf");
  }
  return data;
}

inline Vec vector_from_json(const json& j) {
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const auto& e = j[static_cast<std::size_t>(i)];
    if (e.is_string()) {
      const auto s = e.get<std::string>();
      v(i) = (s == "-inf") ? -std::numeric_limits<double>::infinity()
                           : std::numeric_limits<double>::infinity();
    } else {
      v(i) = e.get<double>();
    }
  }
  return v;
}

inline void expect_format(const json& j, const std::string& format, int version) {
  if (j.value("format", "") != format)
    throw IoError("expected format '" + format + "', got '" + j.value("format", "") + "'");
  if (j.value("version", -1) != version)
    throw IoError("unsupported version of '" + format + "'");
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(1) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  // allow // and /* */ comments so config files can carry unit annotations
  return json::parse(in, nullptr, true, true);
}

}  // namespace lkc
