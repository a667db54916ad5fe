#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kbub/cli.hpp"
#include "kbub/dataset.hpp"
#include "kbub/dmd.hpp"
#include "kbub/export.hpp"
#include "kbub/koopman.hpp"
#include "kbub/scenario.hpp"

namespace py = pybind11;
using namespace kbub;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [n, 4, nz, nx] in conserved order rho, rho_u1, rho_u3, rho_theta
Array states_array(const std::vector<State2D>& states, int nx, int nz) {
  const auto cells = static_cast<std::size_t>(nx) * static_cast<std::size_t>(nz);
  Array a({states.size(), std::size_t{4}, static_cast<std::size_t>(nz), static_cast<std::size_t>(nx)});
  double* p = a.mutable_data();
  for (const State2D& s : states) {
    for (const Field* f : {&s.rho, &s.rho_u1, &s.rho_u3, &s.rho_theta}) {
      if (f->size() != cells) throw ShapeError("state does not match the grid");
      p = std::copy(f->begin(), f->end(), p);
    }
  }
  return a;
}

py::dict spec_dict(const BubbleSpec& b) {
  py::dict d;
  d["kind"] = b.kind == BubbleKind::hot ? "hot" : "cold";
  d["temp_k"] = b.temp_k;
  d["radius_m"] = b.radius_m;
  d["stability_m"] = b.stability_m;
  d["cx_m"] = b.cx_m;
  d["cz_m"] = b.cz_m;
  return d;
}

py::dict record_dict(const TrajectoryRecord& r, int nx, int nz) {
  py::list specs;
  for (const auto& b : r.specs) specs.append(spec_dict(b));
  std::vector<double> times;
  for (const auto& s : r.states) times.push_back(s.time);
  py::dict d;
  d["specs"] = specs;
  d["states"] = states_array(r.states, nx, nz);
  d["times"] = times;
  d["truncated"] = r.truncated;
  return d;
}

py::dict stats_dict(const NormStats& s) {
  py::dict d;
  for (int v = 0; v < kNumVariables; ++v) {
    d[variable_name(static_cast<Variable>(v))] = py::make_tuple(s.mean[v], s.std[v]);
  }
  return d;
}

py::dict dmd_dict(const DMDResult& r, const SnapshotMatrix& s) {
  py::dict d;
  d["rank"] = r.rank;
  d["singular_values"] = r.singular_values;
  d["atilde"] = r.atilde;
  d["eigenvalues"] = r.eigenvalues;
  d["modes"] = r.modes;
  d["amplitudes"] = r.amplitudes;
  d["one_step_residual"] = one_step_residual(r, s);
  return d;
}

}  // namespace

PYBIND11_MODULE(_kbub, m) {
  m.doc() = "Compressible Euler bubble simulator, Koopman autoencoder and DMD";

  auto base = py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  (void)base;

  m.def(
      "generate_trajectory",
      [](int nx, int nz, int n_steps, std::uint64_t seed, std::uint64_t index, double interval, double cfl) {
        ScenarioConfig c;
        c.grid.nx = nx;
        c.grid.nz = nz;
        c.n_steps = n_steps;
        c.seed = seed;
        c.output_interval_s = interval;
        c.cfl = cfl;
        TrajectoryRecord r;
        {
          py::gil_scoped_release nogil;
          r = generate_trajectory(c, index);
        }
        return record_dict(r, nx, nz);
      },
      py::arg("nx") = 32, py::arg("nz") = 32, py::arg("n_steps") = 10, py::arg("seed") = 0, py::arg("index") = 0,
      py::arg("output_interval_s") = 5.0, py::arg("cfl") = 0.4,
      "Random bubble scenario integrated on a 1 km x 1 km box. states: [n, 4, nz, nx].");

  m.def(
      "hydrostatic_background",
      [](int nx, int nz) {
        Grid2D g;
        g.nx = nx;
        g.nz = nz;
        g.validate();
        Array a = states_array({hydrostatic_background(g, PhysConstants{})}, nx, nz);
        a.resize({std::size_t{4}, static_cast<std::size_t>(nz), static_cast<std::size_t>(nx)});
        return a;
      },
      py::arg("nx") = 100, py::arg("nz") = 100);

  m.def(
      "read_dataset",
      [](const std::string& path) {
        const Dataset ds = read_dataset(path);
        py::list recs;
        for (const auto& r : ds.records) recs.append(record_dict(r, ds.nx, ds.nz));
        py::dict d;
        d["nx"] = ds.nx;
        d["nz"] = ds.nz;
        d["dtype"] = ds.dtype == PayloadType::f32 ? "f32" : "f64";
        d["stats"] = stats_dict(ds.stats);
        d["records"] = recs;
        return d;
      },
      py::arg("path"));

  m.def(
      "transform_variables",
      [](Array state) {
        if (state.ndim() != 3 || state.shape(0) != 4) throw ShapeError("expected a [4, nz, nx] state");
        const auto cells = static_cast<std::size_t>(state.shape(1) * state.shape(2));
        const double* p = state.data();
        State2D s;
        s.rho.assign(p, p + cells);
        s.rho_u1.assign(p + cells, p + 2 * cells);
        s.rho_u3.assign(p + 2 * cells, p + 3 * cells);
        s.rho_theta.assign(p + 3 * cells, p + 4 * cells);
        const TransformedState t = transform_variables(s);
        Array out({std::size_t{4}, static_cast<std::size_t>(state.shape(1)), static_cast<std::size_t>(state.shape(2))});
        double* o = out.mutable_data();
        for (const Field* f : {&t.rho, &t.u1, &t.u3, &t.theta}) o = std::copy(f->begin(), f->end(), o);
        return out;
      },
      py::arg("state"), "rho, u1, u3, theta from conserved variables.");

  m.def(
      "fit_dmd",
      [](const Eigen::MatrixXd& states, std::optional<std::size_t> rank, double threshold) {
        const SnapshotMatrix s = build_snapshots(states);
        DMDOptions o;
        o.rank = rank;
        o.rank_threshold = threshold;
        return dmd_dict(fit_dmd(s, o), s);
      },
      py::arg("states"), py::arg("rank") = py::none(), py::arg("rank_threshold") = 1e-10,
      "Exact DMD of a [n_features, n_snapshots] matrix of consecutive states.");

  m.def(
      "dmd_predict",
      [](const Eigen::MatrixXd& states, const Eigen::VectorXd& x0, int steps, std::optional<std::size_t> rank) {
        DMDOptions o;
        o.rank = rank;
        const DMDPrediction p = dmd_predict(fit_dmd(build_snapshots(states), o), x0, steps);
        Eigen::MatrixXd out(x0.size(), static_cast<Eigen::Index>(p.states.size()));
        for (std::size_t k = 0; k < p.states.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = p.states[k];
        return out;
      },
      py::arg("states"), py::arg("x0"), py::arg("steps"), py::arg("rank") = py::none(),
      "Columns k = 0 .. steps of Phi Lambda^k b.");

  m.def(
      "shape_trace",
      [](const std::string& preset) {
        AEConfig c;
        if (preset == "paper") {
          c = AEConfig::paper();
        } else if (preset != "desk") {
          throw ConfigError("preset must be desk or paper");
        }
        py::list rows;
        for (const auto& r : KoopmanAE(c, 0).shape_trace()) rows.append(py::make_tuple(r.layer, r.shape));
        return rows;
      },
      py::arg("preset") = "desk");

  m.def("gray_level", [](double v, double lo, double hi) { return gray_level(v, ValueRange{lo, hi}); },
        py::arg("value"), py::arg("lo"), py::arg("hi"));

  m.def(
      "encode_pgm",
      [](Array field, std::optional<std::pair<double, double>> range) {
        if (field.ndim() != 2) throw ShapeError("expected a [nz, nx] field");
        std::optional<ValueRange> r;
        if (range) r = ValueRange{range->first, range->second};
        const auto bytes =
            encode_pgm({field.data(), static_cast<std::size_t>(field.size())}, static_cast<int>(field.shape(1)),
                       static_cast<int>(field.shape(0)), r);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("field"), py::arg("range") = py::none(), "Binary PGM; row 0 of the field is the bottom of the image.");

  m.def(
      "main",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "kbub");
        py::gil_scoped_release nogil;
        return cli::run(args);
      },
      py::arg("args"), "Runs the command-line tool in-process; returns the exit code.");
}
