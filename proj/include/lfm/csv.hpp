#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace lfm {

/// 17 significant digits, enough to round-trip any double.
inline std::string format_double(double v) { return fmt::format("{:.17g}", v); }

/// Comma-separated file with a header row; '.' decimal point regardless of locale.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
    out_ << fmt::format("{}\n", fmt::join(header, ","));
  }

  void row(const std::vector<std::string>& cells) { out_ << fmt::format("{}\n", fmt::join(cells, ",")); }

 private:
  std::ofstream out_;
};

}  // namespace lfm
