#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tsg/harness.hpp"

namespace tsg::plots {

/// One SVG line chart: x is the epoch, y the metric values.
void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::vector<double>& xs, const std::vector<double>& ys);

/// Prediction-vs-ground-truth timeline bars for up to max_rows samples.
void write_timelines(const std::filesystem::path& path,
                     const harness::EvalResult& result, int max_rows = 24);

/// Emit one chart per metric column of a metrics.csv plus timelines when an
/// eval.csv is present. Returns the written file paths.
std::vector<std::filesystem::path> plot_run_dir(const std::filesystem::path& run_dir);

}  // namespace tsg::plots
