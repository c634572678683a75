// Python bindings for the core library. Arrays cross the boundary as NumPy
// float64 arrays; audio is (channels, samples).

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "beamloc/beamform.hpp"
#include "beamloc/error.hpp"
#include "beamloc/eval.hpp"
#include "beamloc/features.hpp"
#include "beamloc/geometry.hpp"
#include "beamloc/model.hpp"
#include "beamloc/pipeline.hpp"
#include "beamloc/scenes.hpp"

namespace py = pybind11;
using namespace beamloc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

AudioBuffer to_audio(const Array& a) {
  if (a.ndim() != 2) throw InputError("audio must be a 2-D array (channels, samples)");
  AudioBuffer out(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), out.samples.begin());
  return out;
}

Array from_audio(const AudioBuffer& audio) {
  Array out({audio.channels, audio.frames});
  std::copy(audio.samples.begin(), audio.samples.end(), out.mutable_data());
  return out;
}

Array from_stack(const FeatureStack& s) {
  Array out({s.channels, kMelBins, kTimeBins});
  std::copy(s.values.begin(), s.values.end(), out.mutable_data());
  return out;
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  d["ap_at_2deg"] = r.ap_at_2deg;
  d["f1_at_2deg"] = r.f1_at_2deg;
  d["ap_at_5deg"] = r.ap_at_5deg;
  d["f1_at_5deg"] = r.f1_at_5deg;
  d["ad_px"] = r.ad_px;
  d["ad_deg"] = r.ad_deg;
  d["ad_defined"] = r.ad_defined;
  d["cls_accuracy"] = r.cls_accuracy;
  d["frames"] = r.frames;
  d["active_frames"] = r.active_frames;
  return d;
}

}  // namespace

PYBIND11_MODULE(_beamloc, m) {
  m.doc() = "Beamformer front end, log-mel features, localization network and detection metrics";

  auto error = py::register_exception<Error>(m, "Error");
  py::register_exception<InputError>(m, "InputError", error.ptr());
  py::register_exception<FormatError>(m, "FormatError", error.ptr());
  py::register_exception<DomainError>(m, "DomainError", error.ptr());
  py::register_exception<CalibrationError>(m, "CalibrationError", error.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", error.ptr());

  m.attr("SAMPLE_RATE") = kSampleRate;
  m.attr("IMAGE_WIDTH_PX") = kImageWidthPx;

  // geometry
  m.def("default_mic_positions", [] {
    const auto g = default_ava_array();
    Array out({g.size(), std::size_t{3}});
    auto r = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < g.size(); ++i) {
      r(i, 0) = g.mic_positions[i].x;
      r(i, 1) = g.mic_positions[i].y;
      r(i, 2) = g.mic_positions[i].z;
    }
    return out;
  }, "16 x 3 microphone positions of the nominal array, in metres");
  m.def("steering_delays", [](double azimuth_deg, double elevation_deg) {
    return steering_delays(default_ava_array(), azimuth_deg, elevation_deg);
  }, py::arg("azimuth_deg"), py::arg("elevation_deg") = 0.0, "Plane-wave arrival times at each mic, seconds");
  m.def("default_focal_px", &default_focal_px);
  m.def("azimuth_to_pixel", [](double az, double principal_x) {
    CameraModel cam;
    cam.principal_x_px = principal_x;
    return azimuth_to_pixel(cam, az);
  }, py::arg("azimuth_deg"), py::arg("principal_x_px") = kImageWidthPx / 2.0);
  m.def("pixel_to_azimuth", [](double x, double principal_x) {
    CameraModel cam;
    cam.principal_x_px = principal_x;
    return pixel_to_azimuth(cam, x);
  }, py::arg("x_px"), py::arg("principal_x_px") = kImageWidthPx / 2.0);
  m.def("look_direction_preset", [](std::size_t n) { return look_direction_preset(n).azimuths_deg(); });

  // beamformer
  py::class_<BeamformerDesign>(m, "BeamformerDesign")
      .def_readonly("fft_size", &BeamformerDesign::fft_size)
      .def_readonly("n_mics", &BeamformerDesign::n_mics)
      .def_property_readonly("look_dirs_deg", [](const BeamformerDesign& d) { return d.look_dirs.azimuths_deg(); })
      .def_property_readonly("weights", [](const BeamformerDesign& d) {
        py::array_t<std::complex<double>> out({d.n_bins(), d.n_dirs(), d.n_mics});
        std::copy(d.weights.begin(), d.weights.end(), out.mutable_data());
        return out;
      }, "Complex weights indexed [bin, direction, mic]")
      .def_property_readonly("flagged", [](const BeamformerDesign& d) {
        py::array_t<bool> out({d.n_bins(), d.n_dirs()});
        std::transform(d.flagged.begin(), d.flagged.end(), out.mutable_data(), [](auto f) { return f != 0; });
        return out;
      })
      .def("apply", [](const BeamformerDesign& d, const Array& audio) {
        return from_audio(apply_beamformer(d, to_audio(audio)));
      }, py::arg("audio"));
  m.def("design_sdb", [](const std::vector<double>& look_dirs, std::size_t fft_size, double wng_min_db) {
    return design_sdb(default_ava_array(), LookDirectionSet(look_dirs), fft_size, kSampleRate, wng_min_db);
  }, py::arg("look_dirs_deg"), py::arg("fft_size") = 512, py::arg("wng_min_db") = kDefaultWngMinDb);
  m.def("beam_response", [](const BeamformerDesign& d, std::size_t bin, std::size_t dir, double az) {
    return beam_response(default_ava_array(), d.weights_at(bin, dir), d.bin_frequency(bin), az);
  }, py::arg("design"), py::arg("bin"), py::arg("direction"), py::arg("azimuth_deg"));

  // features
  m.def("log_mel", [](const Array& chunk) {
    if (chunk.ndim() != 1) throw InputError("chunk must be 1-D");
    const Eigen::MatrixXd img = log_mel(std::span<const double>(chunk.data(), chunk.size()));
    Array out({img.rows(), img.cols()});
    auto r = out.mutable_unchecked<2>();
    for (Eigen::Index i = 0; i < img.rows(); ++i) {
      for (Eigen::Index j = 0; j < img.cols(); ++j) r(i, j) = img(i, j);
    }
    return out;
  }, py::arg("chunk"), "64 x 64 log-mel image (mel bins x time bins) of an 8000-sample chunk");
  m.def("extract_features", [](const Array& audio, std::int64_t frame) {
    return from_stack(extract_features(to_audio(audio), frame));
  }, py::arg("audio"), py::arg("frame"));
  m.def("calibrate_gains", [](const Array& audio, double target_rms) {
    return calibrate_gains(to_audio(audio), target_rms);
  }, py::arg("audio"), py::arg("target_rms"));

  // model
  m.def("target_confidence", &target_confidence, py::arg("active"), py::arg("x"), py::arg("x_hat"));
  m.def("loss", [](double x_hat, double c_hat, bool active, double x) {
    const auto t = loss(Prediction{x_hat, c_hat}, active, x);
    return py::make_tuple(t.position, t.confidence, t.total());
  }, py::arg("x_hat"), py::arg("c_hat"), py::arg("active"), py::arg("x"), "(position, confidence, total)");

  // evaluation
  m.def("sigmoid_thresholds", &sigmoid_thresholds, py::arg("count") = kDefaultThresholdCount,
        py::arg("range") = kThresholdRange);
  m.def("tolerance_px", [](double deg) { return tolerance_px(CameraModel{}, deg); }, py::arg("tolerance_deg"));
  m.def("evaluate", [](const std::vector<std::tuple<std::int64_t, int, double, double>>& detections,
                       const std::vector<std::tuple<std::int64_t, int, bool, std::optional<double>>>& labels,
                       const std::vector<double>& principal_x_px) {
    std::vector<Detection> dets;
    for (const auto& [f, v, x, c] : detections) dets.push_back({f, v, x, c});
    std::vector<LabelRecord> truth;
    for (const auto& [f, v, a, x] : labels) truth.push_back({f, v, a, x, true});
    std::vector<CameraModel> cams;
    for (std::size_t i = 0; i < principal_x_px.size(); ++i) {
      CameraModel c;
      c.view_id = static_cast<int>(i);
      c.principal_x_px = principal_x_px[i];
      cams.push_back(c);
    }
    return report_dict(evaluate(dets, truth, cams));
  }, py::arg("detections"), py::arg("labels"), py::arg("principal_x_px") = std::vector<double>{kImageWidthPx / 2.0},
     "detections: (frame, view, x_hat_px, c_hat); labels: (frame, view, active, x_px or None)");
  m.def("gaussian_smooth", [](const std::vector<std::tuple<std::int64_t, int, double, double>>& detections,
                              double sigma) {
    std::vector<Detection> dets;
    for (const auto& [f, v, x, c] : detections) dets.push_back({f, v, x, c});
    std::vector<std::tuple<std::int64_t, int, double, double>> out;
    for (const auto& d : gaussian_smooth(dets, sigma)) out.emplace_back(d.frame, d.view_id, d.x_hat_px, d.c_hat);
    return out;
  }, py::arg("detections"), py::arg("sigma_frames"));

  // pipeline
  m.def("default_config", [] { return PipelineConfig{}.to_json(); }, "Default pipeline configuration as JSON text");
  m.def("config_hash", [](const std::string& json_text) { return PipelineConfig::from_json(json_text).hash(); });
  auto config = [](const std::string& text) { return PipelineConfig::from_json(text.empty() ? "{}" : text); };
  m.def("simulate", [config](const std::string& cfg, const std::filesystem::path& out) {
    py::gil_scoped_release release;
    run_simulate(config(cfg), {out});
  }, py::arg("config_json"), py::arg("out_dir"));
  m.def("featurize", [config](const std::string& cfg, const std::filesystem::path& dataset,
                              const std::filesystem::path& out) {
    py::gil_scoped_release release;
    run_featurize(config(cfg), {dataset, std::nullopt, out});
  }, py::arg("config_json"), py::arg("dataset"), py::arg("out_dir"));
  m.def("train", [config](const std::string& cfg, const std::filesystem::path& features,
                          const std::filesystem::path& out) {
    py::gil_scoped_release release;
    run_train(config(cfg), {features, out});
  }, py::arg("config_json"), py::arg("features_dir"), py::arg("out_dir"));
  m.def("infer", [config](const std::string& cfg, const std::filesystem::path& model,
                          const std::filesystem::path& features, const std::filesystem::path& out,
                          std::optional<double> smooth) {
    py::gil_scoped_release release;
    run_infer(config(cfg), {model, features, smooth, out});
  }, py::arg("config_json"), py::arg("model"), py::arg("features_dir"), py::arg("out_dir"),
     py::arg("smooth_sigma") = py::none());
  m.def("evaluate_dataset", [config](const std::string& cfg, const std::filesystem::path& dataset,
                                     const std::filesystem::path& detections_dir, const std::filesystem::path& out) {
    EvalRunOptions o;
    o.dataset = dataset;
    o.detections_dir = detections_dir;
    o.out_dir = out;
    MetricsReport r;
    {
      py::gil_scoped_release release;
      run_eval(config(cfg), o, &r);
    }
    return report_dict(r);
  }, py::arg("config_json"), py::arg("dataset"), py::arg("detections_dir"), py::arg("out_dir"));
}
