#include "homeostat/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "homeostat/errors.hpp"
#include "homeostat/metrics.hpp"
#include "json.hpp"

namespace homeostat {

namespace {

std::string number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                    "#bcbd22", "#17becf"};

}  // namespace

std::vector<double> RunSummary::bleu_curve(const std::string& split) const {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r.bleu);
  }
  if (out.empty() && split != "train") return bleu_curve("train");
  return out;
}

double RunSummary::best_bleu(const std::string& split) const {
  const auto curve = bleu_curve(split);
  return curve.empty() ? 0.0 : *std::max_element(curve.begin(), curve.end());
}

std::optional<double> RunSummary::imi_train() const {
  const auto curve = bleu_curve("train");
  if (curve.size() < 2) return std::nullopt;
  return imi(curve);
}

RunSummary load_run(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + run_dir.string());
  RunSummary run;
  try {
    const auto manifest = nlohmann::json::parse(in);
    const auto& cfg = manifest.at("config");
    run.experiment_id = manifest.at("experiment_id").get<std::string>();
    run.variant = cfg.at("variant").get<std::string>();
    run.s = cfg.at("s").get<double>();
    run.q_att = cfg.at("q_att").get<std::size_t>();
    run.q_bo = cfg.at("q_bo").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(run_dir.string() + "/manifest.json: " + e.what());
  }
  run.records = read_metrics_csv(run_dir / "metrics.csv");
  return run;
}

std::vector<RunSummary> discover_runs(
    const std::vector<std::filesystem::path>& paths) {
  std::vector<RunSummary> runs;
  for (const auto& path : paths) {
    if (std::filesystem::exists(path / "manifest.json")) {
      runs.push_back(load_run(path));
      continue;
    }
    if (!std::filesystem::is_directory(path)) continue;
    std::vector<std::filesystem::path> children;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_directory() &&
          std::filesystem::exists(entry.path() / "manifest.json")) {
        children.push_back(entry.path());
      }
    }
    std::sort(children.begin(), children.end());
    for (const auto& child : children) runs.push_back(load_run(child));
  }
  std::stable_sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) {
    return a.experiment_id < b.experiment_id;
  });
  return runs;
}

std::string report_csv(const std::vector<RunSummary>& runs,
                       const std::string& split) {
  std::ostringstream out;
  out << "experiment_id,variant,s,q_att,q_bo,best_bleu,imi\n";
  out.precision(10);
  for (const auto& run : runs) {
    out << csv_field(run.experiment_id) << ',' << run.variant << ',' << run.s
        << ',' << run.q_att << ',' << run.q_bo << ',' << run.best_bleu(split)
        << ',';
    if (const auto v = run.imi_train()) out << *v;
    out << '\n';
  }
  return out.str();
}

std::string report_svg(const std::vector<RunSummary>& runs,
                       const std::string& split) {
  constexpr double width = 720, height = 420;
  constexpr double left = 60, right = 180, top = 30, bottom = 50;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  std::size_t max_epochs = 1;
  for (const auto& run : runs) {
    max_epochs = std::max(max_epochs, run.bleu_curve(split).size());
  }
  auto x_of = [&](std::size_t i) {
    return left + (max_epochs > 1 ? plot_w * static_cast<double>(i) /
                                        static_cast<double>(max_epochs - 1)
                                  : plot_w / 2);
  };
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << ' '
      << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" "
         "font-size=\"14\">BLEU per epoch (" << xml_escape(split) << ")</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\""
      << left + plot_w << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"end\">" << number(v) << "</text>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\" "
         "text-anchor=\"middle\">epoch</text>\n";

  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto curve = runs[r].bleu_curve(split);
    const char* color = kPalette[r % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.size(); ++i) {
      svg << (i ? " " : "") << number(x_of(i)) << ',' << number(y_of(curve[i]));
    }
    svg << "\"/>\n";
    const double ly = top + 16.0 * static_cast<double>(r) + 8;
    svg << "<line x1=\"" << width - right + 10 << "\" y1=\"" << ly << "\" x2=\""
        << width - right + 30 << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text class=\"legend\" x=\"" << width - right + 36 << "\" y=\""
        << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">"
        << xml_escape(runs[r].experiment_id) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace homeostat
