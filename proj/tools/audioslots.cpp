// audioslots command line: train, evaluate, separate, make-dataset, plot-spec.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "audioslots/audioslots.hpp"

namespace fs = std::filesystem;
using namespace audioslots;

namespace {

// A tee so the metrics log goes to stdout and to a file.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    const int r1 = a_->sputc(static_cast<char>(c));
    const int r2 = b_ ? b_->sputc(static_cast<char>(c)) : r1;
    return r1 == EOF || r2 == EOF ? EOF : c;
  }
  int sync() override {
    const int r1 = a_->pubsync();
    const int r2 = b_ ? b_->pubsync() : 0;
    return r1 == 0 && r2 == 0 ? 0 : -1;
  }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!config::trim(item).empty()) out.push_back(config::trim(item));
  return out;
}

// DIR, or synth:SEED:COUNT[:SECONDS].
data::DatasetManifest open_dataset(const std::string& spec) {
  if (spec.rfind("synth:", 0) == 0) {
    const auto parts = split(spec, ':');
    if (parts.size() != 3 && parts.size() != 4)
      throw InvalidArgument("synthetic data spec must be synth:SEED:COUNT[:SECONDS], got " + spec);
    data::SynthConfig sc;
    if (parts.size() == 4) sc.duration_seconds = config::parse_number<double>("data", parts[3]);
    return data::synthetic_manifest(config::parse_number<std::uint64_t>("data", parts[1]),
                                    config::parse_number<std::size_t>("data", parts[2]), sc);
  }
  return data::load_manifest(spec);
}

std::vector<separation::MaskType> parse_masks(const std::string& s) {
  std::vector<separation::MaskType> out;
  for (const auto& m : split(s, ',')) out.push_back(separation::parse_mask_type(m));
  if (out.empty()) throw InvalidArgument("--masks needs at least one of ibm,wiener");
  return out;
}

int run_train(const std::string& config_path, const std::string& preset, const std::optional<std::uint64_t>& seed,
              const std::optional<std::size_t>& steps, std::string data_spec, std::string out_dir) {
  model::ModelConfig mc = preset == "full" ? model::ModelConfig::full() : model::ModelConfig::desk();
  pipeline::TrainConfig tc = preset == "full" ? pipeline::TrainConfig{} : pipeline::TrainConfig::desk();
  if (preset != "full" && preset != "desk") throw InvalidArgument("unknown preset " + preset + " (desk or full)");
  if (!config_path.empty()) {
    const auto kv = config::load_file(config_path);
    std::set<std::string> known{"data", "out"};
    for (const auto& [k, v] : mc.to_kv()) known.insert(k);
    for (const auto& [k, v] : tc.to_kv()) known.insert(k);
    for (const auto& [k, v] : kv)
      if (!known.count(k)) throw InvalidArgument("unknown config key '" + k + "' in " + config_path);
    mc.apply(kv);
    tc.apply(kv);
    if (data_spec.empty()) config::read(kv, "data", data_spec);
    if (out_dir.empty()) config::read(kv, "out", out_dir);
  }
  if (seed) {
    tc.seed = *seed;
    mc.init_seed = *seed;
  }
  if (steps) tc.steps = *steps;
  if (data_spec.empty()) throw InvalidArgument("train: no dataset given (--data or config key data)");
  if (out_dir.empty()) throw InvalidArgument("train: no output directory given (--out or config key out)");
  tc.validate();
  mc.validate();

  fs::create_directories(out_dir);
  std::ofstream logfile(fs::path(out_dir) / "metrics.log");
  if (!logfile) throw IoError("cannot write " + (fs::path(out_dir) / "metrics.log").string());
  TeeBuf tee(std::cout.rdbuf(), logfile.rdbuf());
  std::ostream log(&tee);

  const auto ds = open_dataset(data_spec);
  log << "event=start data=" << data_spec << " out=" << out_dir << '\n';
  pipeline::TrainHooks hooks;
  hooks.log = &log;
  hooks.out_dir = out_dir;
  hooks.on_eval = [&](std::size_t, model::AudioSlots<float>& net) {
    pipeline::evaluate(&net, ds, {separation::MaskType::Ibm, separation::MaskType::Wiener}, false, true, &log);
  };
  pipeline::train(tc, mc, ds, hooks);
  log.flush();
  return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& data_spec, const std::string& masks, bool oracle,
                 bool json) {
  const auto mask_types = parse_masks(masks);
  const auto ds = open_dataset(data_spec);
  std::optional<model::AudioSlots<float>> net;
  if (!ckpt.empty()) net.emplace(pipeline::model_from_checkpoint<float>(pipeline::load_checkpoint(ckpt)));
  if (!net && !oracle) throw InvalidArgument("evaluate: give --ckpt, --oracle, or both");
  const auto summary =
      pipeline::evaluate(net ? &*net : nullptr, ds, mask_types, oracle, net.has_value(), json ? nullptr : &std::cout);
  if (json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : summary.rows) {
      const std::string m = separation::to_string(r.mask);
      j.push_back({{"system", r.system},
                   {"mask_type", m},
                   {"examples", r.si_snr.count},
                   {"si_snr_" + m, r.si_snr.mean},
                   {"si_snr_" + m + "_stderr", r.si_snr.stderr_},
                   {"si_snri_" + m, r.si_snri.mean},
                   {"si_snri_" + m + "_stderr", r.si_snri.stderr_}});
    }
    std::cout << j.dump(2) << '\n';
  }
  return 0;
}

int run_separate(const std::string& ckpt, const std::string& in, const std::string& out_dir, const std::string& mask,
                 const std::string& refs, bool oracle) {
  const auto mixture = data::read_wav(in);
  separation::SeparateOptions o;
  o.mask = separation::parse_mask_type(mask);
  o.oracle = oracle;
  for (const auto& r : split(refs, ',')) o.references.push_back(data::read_wav(r));
  std::optional<model::AudioSlots<float>> net;
  if (!ckpt.empty()) net.emplace(pipeline::model_from_checkpoint<float>(pipeline::load_checkpoint(ckpt)));
  if (!net && !oracle) throw InvalidArgument("separate: --ckpt is required unless --oracle is given");
  const auto res = separation::separate<float>(mixture, net ? &*net : nullptr, o);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < res.sources.size(); ++i) {
    const auto path = fs::path(out_dir) / ("s" + std::to_string(i + 1) + ".wav");
    data::write_wav(path, res.sources[i]);
    std::cout << "event=write source=" << i + 1 << " path=" << path.string() << '\n';
  }
  std::cout << "event=separate mask=" << mask << " alignment=" << res.alignment << " chunks="
            << dsp::chunk(mixture).chunks.size() << '\n';
  return 0;
}

int run_make_dataset(std::uint64_t seed, std::size_t count, double seconds, const std::string& out) {
  data::SynthConfig sc;
  sc.duration_seconds = seconds;
  const auto m = data::synthetic_manifest(seed, count, sc);
  std::vector<data::MixtureExample> examples;
  for (std::size_t i = 0; i < m.size(); ++i) examples.push_back(data::load_example(m, i));
  data::write_dataset(out, examples);
  std::cout << "event=make-dataset count=" << count << " seed=" << seed << " seconds=" << seconds << " out=" << out
            << '\n';
  return 0;
}

int run_plot_spec(const std::string& in, const std::string& out, const std::string& ckpt, std::size_t slot,
                  std::size_t chunk_index) {
  const auto w = data::read_wav(in);
  dsp::Grid g;
  if (ckpt.empty()) {
    g = dsp::compress(dsp::magnitude(dsp::stft(w)));
  } else {
    auto net = pipeline::model_from_checkpoint<float>(pipeline::load_checkpoint(ckpt));
    const auto chunks = dsp::chunk(w);
    if (chunk_index >= chunks.chunks.size())
      throw InvalidArgument("--chunk " + std::to_string(chunk_index) + " out of range (" +
                            std::to_string(chunks.chunks.size()) + " chunks)");
    if (slot >= net.config().n_slots)
      throw InvalidArgument("--slot " + std::to_string(slot) + " out of range (" +
                            std::to_string(net.config().n_slots) + " slots)");
    ad::Tape<float> tape;
    tape.set_grad_enabled(false);
    const auto x = separation::to_tensor<float>(separation::preprocess(chunks.chunks[chunk_index], net.config().freq_bins));
    const auto y = net.forward(tape, x);
    g = dsp::Grid(y.dim(1), y.dim(2));
    const std::size_t cells = g.size();
    for (std::size_t k = 0; k < cells; ++k) g.values[k] = std::max(y.value().data[slot * cells + k], 0.0f);
  }
  pipeline::export_spectrogram_image(g, out);
  std::cout << "event=plot width=" << g.cols << " height=" << g.rows << " path=" << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AudioSlots source separation"};
  app.require_subcommand(1);

  std::string config_path, preset = "desk", data_spec, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--preset", preset, "Base settings before the config file: desk or full");
  train->add_option("--seed", seed, "Seed for initialization, batching and cropping");
  train->add_option("--steps", steps, "Number of optimizer steps");
  train->add_option("--data", data_spec, "Dataset directory or synth:SEED:COUNT[:SECONDS]");
  train->add_option("--out", out_dir, "Output directory for checkpoints and metrics.log");

  std::string ckpt, masks = "ibm,wiener";
  bool oracle = false, json = false;
  auto* eval = app.add_subcommand("evaluate", "Report SI-SNR and SI-SNRi");
  eval->add_option("--ckpt", ckpt, "Checkpoint file");
  eval->add_option("--data", data_spec, "Dataset directory or synth:SEED:COUNT[:SECONDS]")->required();
  eval->add_option("--masks", masks, "Comma-separated mask types");
  eval->add_flag("--oracle", oracle, "Also report oracle masks from ground-truth spectrograms");
  eval->add_flag("--json", json, "Print the summary as JSON");

  std::string in, mask = "wiener", refs;
  auto* sep = app.add_subcommand("separate", "Separate a mixture WAV into source WAVs");
  sep->add_option("--ckpt", ckpt, "Checkpoint file");
  sep->add_option("--in", in, "Mixture WAV (16-bit PCM, mono, 16 kHz)")->required();
  sep->add_option("--out-dir", out_dir, "Directory for s1.wav, s2.wav, ...")->required();
  sep->add_option("--mask", mask, "ibm or wiener");
  sep->add_option("--refs", refs, "Comma-separated reference WAVs used to align chunks");
  sep->add_flag("--oracle", oracle, "Use the references' spectrograms instead of the model");

  std::uint64_t ds_seed = 0;
  std::size_t count = 0;
  double seconds = 10.0;
  auto* make = app.add_subcommand("make-dataset", "Write synthetic mixtures in mix_clean/ s1/ s2/ layout");
  make->add_option("--seed", ds_seed, "Dataset seed")->required();
  make->add_option("--count", count, "Number of mixtures")->required();
  make->add_option("--seconds", seconds, "Duration of each mixture");
  make->add_option("--out", out_dir, "Output directory")->required();

  std::size_t slot = 0, chunk_index = 0;
  auto* plot = app.add_subcommand("plot-spec", "Write a compressed spectrogram as a PGM image");
  plot->add_option("--in", in, "Input WAV")->required();
  plot->add_option("--out", out_dir, "Output .pgm path")->required();
  plot->add_option("--ckpt", ckpt, "Plot this model's prediction instead of the input spectrogram");
  plot->add_option("--slot", slot, "Slot to plot with --ckpt");
  plot->add_option("--chunk", chunk_index, "0.5 s chunk to plot with --ckpt");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(config_path, preset, seed, steps, data_spec, out_dir);
    if (*eval) return run_evaluate(ckpt, data_spec, masks, oracle, json);
    if (*sep) return run_separate(ckpt, in, out_dir, mask, refs, oracle);
    if (*make) return run_make_dataset(ds_seed, count, seconds, out_dir);
    if (*plot) return run_plot_spec(in, out_dir, ckpt, slot, chunk_index);
  } catch (const ShapeError& e) {
    std::cerr << "error: shape: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: invalid argument: " << e.what() << '\n';
    return 2;
  } catch (const UnsupportedFormat& e) {
    std::cerr << "error: unsupported format: " << e.what() << '\n';
    return 3;
  } catch (const NotFound& e) {
    std::cerr << "error: not found: " << e.what() << '\n';
    return 4;
  } catch (const IntegrityError& e) {
    std::cerr << "error: integrity: " << e.what() << '\n';
    return 5;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 6;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << '\n';
    return 7;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
