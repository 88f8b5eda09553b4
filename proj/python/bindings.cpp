#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "homeostat/cli.hpp"
#include "homeostat/errors.hpp"
#include "homeostat/homeostasis.hpp"
#include "homeostat/metrics.hpp"
#include "homeostat/sparsity.hpp"
#include "homeostat/stats_cache.hpp"
#include "homeostat/transformer.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace homeostat;

namespace {

using RealArray = py::array_t<Real, py::array::c_style | py::array::forcecast>;
using CountArray = py::array_t<Count, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const RealArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<Real>(a.data(), a.data() + a.size()));
}

RealArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  RealArray out(shape);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_array(const SparsityMask& m) {
  std::vector<py::ssize_t> shape(m.shape.begin(), m.shape.end());
  py::array_t<bool> out(shape);
  std::copy(m.bits.begin(), m.bits.end(), out.mutable_data());
  return out;
}

CountMatrix to_counts(const CountArray& a) {
  if (a.ndim() != 2) throw InvalidInput("statistics must be a (heads, features) array");
  return CountMatrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                     std::vector<Count>(a.data(), a.data() + a.size()));
}

template <class M>
RealArray head_matrix(const M& m) {
  RealArray out({static_cast<py::ssize_t>(m.heads), static_cast<py::ssize_t>(m.features)});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

CountArray count_array(const CountMatrix& m) {
  CountArray out({static_cast<py::ssize_t>(m.heads), static_cast<py::ssize_t>(m.features)});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Homeostatic sparsity inserts for transformers";

  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("winners", [](double s, std::size_t n) { return SparsityCoefficient(s).winners(n); },
        "s"_a, "n"_a, "Number of kept values in a slice of length n.");

  m.def(
      "kwta",
      [](const RealArray& x, double s) {
        auto [y, mask] = kwta_apply(to_tensor(x), SparsityCoefficient(s));
        return py::make_tuple(to_array(y), mask_array(mask));
      },
      "x"_a, "s"_a, "Keeps the round(s*n) largest values of each last-axis slice.");

  m.def(
      "boost_factors",
      [](const CountArray& stats, double s, const std::string& reference) {
        return head_matrix(boost_factors(to_counts(stats), SparsityCoefficient(s),
                                         parse_boost_reference(reference)));
      },
      "stats"_a, "s"_a, "reference"_a = "numerator");

  m.def(
      "inhibition_probs",
      [](const CountArray& stats, double s, double a, double b, double gamma,
         const std::string& direction) {
        HomeostasisConfig cfg;
        cfg.mechanism = Mechanism::smart_inhibition;
        cfg.s = s;
        cfg.a = a;
        cfg.b = b;
        cfg.gamma = gamma;
        cfg.direction = parse_inhibition_direction(direction);
        cfg.validate();
        return head_matrix(inhibition_probs(to_counts(stats), cfg));
      },
      "stats"_a, "s"_a = 0.5, "a"_a = 0.99, "b"_a = 0.01, "gamma"_a = 0.83,
      "direction"_a = "rarity");

  m.def("median", [](const std::vector<Real>& p) { return median(p); }, "values"_a);
  m.def("median_adjust",
        [](const std::vector<Real>& p, double s, double delta) { return median_adjust(p, s, delta); },
        "p"_a, "s"_a, "delta"_a = 0.05);

  py::class_<StatsCache>(m, "StatsCache")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), "heads"_a, "capacity"_a,
           "features"_a)
      .def("push", [](StatsCache& c, const CountArray& counts) { c.push(to_counts(counts)); },
           "counts"_a)
      .def("aggregate", [](const StatsCache& c) { return count_array(c.aggregate()); })
      .def_property_readonly("fill", &StatsCache::fill)
      .def_property_readonly("capacity", &StatsCache::capacity)
      .def_property_readonly("heads", &StatsCache::heads)
      .def_property_readonly("features", &StatsCache::features);

  m.def(
      "bleu",
      [](const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
        return bleu(hyps, refs);
      },
      "hypotheses"_a, "references"_a, "Corpus BLEU-4 over token id sequences.");
  m.def("imi", [](const std::vector<double>& f) { return imi(f); }, "series"_a);

  m.def(
      "resolve_config",
      [](const std::string& patch) {
        const auto cfg = resolve_experiment(std::nullopt, nlohmann::json::parse(patch));
        cfg.validate();
        return to_json(cfg).dump();
      },
      "patch"_a = "{}", "Experiment configuration as JSON after applying a JSON patch.");

  m.def(
      "parameter_count",
      [](const std::string& preset, std::size_t vocab) {
        auto cfg = TransformerConfig::preset(preset);
        if (vocab > 0) cfg.src_vocab = cfg.tgt_vocab = vocab;
        return Transformer::parameter_count(cfg);
      },
      "preset"_a, "vocab"_a = 0);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "homeostat");
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      "args"_a, "Runs a command-line invocation; returns (exit code, stdout, stderr).");
}
