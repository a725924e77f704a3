#include "tsg/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tsg::plots {

namespace {

constexpr int kW = 640, kH = 400, kPad = 50;

std::string svg_header(const std::string& title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
    << "font-family=\"sans-serif\">" << title << "</text>\n";
  return o.str();
}

}  // namespace

void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::vector<double>& xs, const std::vector<double>& ys) {
  TSG_CHECK(xs.size() == ys.size() && !xs.empty(), "write_line_chart: bad series");
  double xmin = *std::min_element(xs.begin(), xs.end());
  double xmax = *std::max_element(xs.begin(), xs.end());
  double ymin = *std::min_element(ys.begin(), ys.end());
  double ymax = *std::max_element(ys.begin(), ys.end());
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  auto px = [&](double x) { return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad); };
  auto py = [&](double y) { return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad); };

  std::ofstream out(path);
  TSG_CHECK(out.good(), "write_line_chart: cannot open " << path);
  out << svg_header(title);
  out << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
      << kH - kPad << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
      << kH - kPad << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << kPad << "\" y=\"" << kH - kPad + 20
      << "\" font-size=\"11\" font-family=\"sans-serif\">" << xmin << "</text>\n";
  out << "<text x=\"" << kW - kPad << "\" y=\"" << kH - kPad + 20
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << xmax
      << "</text>\n";
  out << "<text x=\"" << kPad - 6 << "\" y=\"" << kH - kPad
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << ymin
      << "</text>\n";
  out << "<text x=\"" << kPad - 6 << "\" y=\"" << kPad + 4
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << ymax
      << "</text>\n";
  out << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (size_t i = 0; i < xs.size(); ++i) out << px(xs[i]) << "," << py(ys[i]) << " ";
  out << "\"/>\n</svg>\n";
}

void write_timelines(const std::filesystem::path& path, const harness::EvalResult& result,
                     int max_rows) {
  TSG_CHECK(!result.per_sample.empty(), "write_timelines: empty result");
  int rows = std::min<int>(max_rows, static_cast<int>(result.per_sample.size()));
  const int row_h = 34, top = 50;
  const int height = top + rows * row_h + 20;

  std::ofstream out(path);
  TSG_CHECK(out.good(), "write_timelines: cannot open " << path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << height
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kW / 2
      << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" font-family=\"sans-serif\">"
      << "prediction (blue) vs ground truth (green)</text>\n";
  for (int r = 0; r < rows; ++r) {
    const auto& s = result.per_sample[r];
    double dur = std::max({s.gt_end, s.pred_end, 1e-9});
    auto px = [&](double t) { return 150 + t / dur * (kW - 170); };
    int y = top + r * row_h;
    out << "<text x=\"8\" y=\"" << y + 14
        << "\" font-size=\"11\" font-family=\"sans-serif\">" << s.video_id << " ("
        << static_cast<int>(std::round(s.iou * 100)) << "%)</text>\n";
    out << "<rect x=\"" << px(s.gt_start) << "\" y=\"" << y << "\" width=\""
        << std::max(1.0, px(s.gt_end) - px(s.gt_start)) << "\" height=\"9\" fill=\"#2ca02c\"/>\n";
    out << "<rect x=\"" << px(s.pred_start) << "\" y=\"" << y + 11 << "\" width=\""
        << std::max(1.0, px(s.pred_end) - px(s.pred_start))
        << "\" height=\"9\" fill=\"#1f77b4\"/>\n";
  }
  out << "</svg>\n";
}

std::vector<std::filesystem::path> plot_run_dir(const std::filesystem::path& run_dir) {
  std::filesystem::path csv_path = run_dir / "metrics.csv";
  TSG_CHECK(std::filesystem::exists(csv_path), "plot: no metrics.csv in " << run_dir);

  std::ifstream in(csv_path);
  std::string header;
  TSG_CHECK(static_cast<bool>(std::getline(in, header)), "plot: empty metrics.csv");
  std::vector<std::string> cols;
  {
    std::istringstream hs(header);
    std::string c;
    while (std::getline(hs, c, ',')) cols.push_back(c);
  }
  std::vector<std::vector<double>> data(cols.size());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    size_t k = 0;
    while (std::getline(ls, cell, ',') && k < cols.size()) data[k++].push_back(std::stod(cell));
  }
  TSG_CHECK(!data[0].empty(), "plot: metrics.csv has no rows");

  std::vector<std::filesystem::path> written;
  for (size_t c = 1; c < cols.size(); ++c) {
    std::string name = cols[c];
    for (auto& ch : name)
      if (ch == '@' || ch == '.') ch = '_';
    std::filesystem::path p = run_dir / ("metric_" + name + ".svg");
    write_line_chart(p, cols[c], data[0], data[c]);
    written.push_back(p);
  }

  std::filesystem::path eval_path = run_dir / "eval.csv";
  if (std::filesystem::exists(eval_path)) {
    harness::EvalResult res;
    std::ifstream ev(eval_path);
    std::string h;
    std::getline(ev, h);
    while (std::getline(ev, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      harness::EvalResult::PerSample ps;
      std::string cell;
      std::getline(ls, ps.video_id, ',');
      std::getline(ls, cell, ',');
      ps.pred_start = std::stod(cell);
      std::getline(ls, cell, ',');
      ps.pred_end = std::stod(cell);
      std::getline(ls, cell, ',');
      ps.gt_start = std::stod(cell);
      std::getline(ls, cell, ',');
      ps.gt_end = std::stod(cell);
      std::getline(ls, cell, ',');
      ps.iou = std::stod(cell);
      res.per_sample.push_back(std::move(ps));
    }
    if (!res.per_sample.empty()) {
      std::filesystem::path p = run_dir / "timelines.svg";
      write_timelines(p, res);
      written.push_back(p);
    }
  }
  return written;
}

}  // namespace tsg::plots
