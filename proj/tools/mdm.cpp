// mdm: command-line front end for the tokenizer, dataset, training, sampling,
// gradient check and complexity benchmark.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mdm/bench/complexity.hpp"
#include "mdm/pipeline/checkpoint.hpp"
#include "mdm/pipeline/generate.hpp"
#include "mdm/pipeline/gradsuite.hpp"

namespace fs = std::filesystem;
using namespace mdm;

namespace {

constexpr double kGradTolerance = 1e-4;

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << bytes;
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

/// Plain-text PGM (one channel) or PPM (three channels), values clamped to [0, 1].
std::string netpbm(const num::Tensor<float>& img) {
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.dim(2);
  if (C != 1 && C != 3) throw ArgumentError("sample: images must have 1 or 3 channels");
  std::ostringstream os;
  os << (C == 1 ? "P2\n" : "P3\n") << W << ' ' << H << "\n255\n";
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W * C; ++x) {
      const float v = std::clamp(img[y * W * C + x], 0.0f, 1.0f);
      os << (x ? " " : "") << static_cast<int>(std::lround(v * 255.0f));
    }
    os << '\n';
  }
  return os.str();
}

struct Args {
  // tokenize-train / tokenize
  std::string input, model_path, text;
  std::size_t vocab = 64, max_piece = 12;
  bool decode = false;
  // make-dataset
  std::size_t classes = 2, count = 256;
  // train
  std::string data, config, resume, tokenizer;
  std::optional<std::size_t> steps, batch, threads;
  std::optional<double> lr;
  // sample
  std::string checkpoint;
  std::optional<std::size_t> class_id;
  std::string prompt;
  std::size_t sample_steps = 10, samples = 1;
  double guidance = 2.0;
  bool use_ema = false;
  // bench
  std::vector<std::size_t> lengths{64, 128, 256, 512, 1024, 2048, 4096, 8192};
  std::size_t n = 64, m = 4, g = 4, heads = 8, reps = 5, warmup = 2;
  // shared
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_tokenize_train(const Args& a) {
  tok::TrainerConfig tc;
  tc.vocab_size = a.vocab;
  tc.max_piece_length = a.max_piece;
  const auto r = tok::train_unigram(pipeline::detail::read_lines(a.input), tc);
  write_file(a.out, r.model.to_tsv());
  std::cerr << "pieces " << r.model.vocab_size() << " -> " << a.out << "\n";
  return 0;
}

int cmd_tokenize(const Args& a) {
  const auto model = tok::TokenizerModel::from_tsv(read_file(a.model_path));
  std::vector<std::string> lines;
  if (!a.text.empty()) {
    lines.push_back(a.text);
  } else if (!a.input.empty()) {
    lines = pipeline::detail::read_lines(a.input);
  } else {
    for (std::string l; std::getline(std::cin, l);) lines.push_back(l);
  }
  for (const auto& line : lines) {
    if (a.decode) {
      std::vector<int> ids;
      std::istringstream is(line);
      for (int id; is >> id;) ids.push_back(id);
      std::cout << model.decode(ids) << "\n";
    } else {
      const auto ids = model.encode(line);
      for (std::size_t i = 0; i < ids.size(); ++i) std::cout << (i ? " " : "") << ids[i];
      std::cout << "\n";
    }
  }
  return 0;
}

int cmd_make_dataset(const Args& a) {
  const auto d = pipeline::make_dataset(a.classes, a.count, a.seed.value_or(1));
  pipeline::save_dataset(d, a.out);
  std::cerr << "items " << d.size() << " -> " << a.out << "\n";
  return 0;
}

int cmd_train(const Args& a) {
  const auto data = pipeline::load_dataset(a.data);
  pipeline::TrainState<float> s;
  if (!a.resume.empty()) {
    s = pipeline::load_checkpoint<float>(a.resume);
    if (a.lr) s.cfg.learning_rate = *a.lr;
    if (a.batch) s.cfg.batch = *a.batch;
    if (a.threads) s.cfg.threads = *a.threads;
    if (a.steps) s.cfg.steps = *a.steps;
    if (a.seed) throw ArgumentError("--seed cannot be changed when resuming");
    s.cfg.validate();
  } else {
    pipeline::TrainConfig cfg = pipeline::toy_train_config();
    if (!a.config.empty()) cfg = pipeline::train_config_from_json(read_json(a.config), cfg);
    if (a.lr) cfg.learning_rate = *a.lr;
    if (a.batch) cfg.batch = *a.batch;
    if (a.threads) cfg.threads = *a.threads;
    if (a.steps) cfg.steps = *a.steps;
    if (a.seed) cfg.seed = *a.seed;
    s = pipeline::init_train_state<float>(cfg);
  }
  if (!s.tokenizer) {
    s.tokenizer = a.tokenizer.empty() ? pipeline::caption_tokenizer(data, s.cfg.model.codec.vocab)
                                      : tok::TokenizerModel::from_tsv(read_file(a.tokenizer));
  }
  const auto examples = pipeline::prepare_examples<float>(data, *s.tokenizer, s.cfg.model);
  fs::create_directories(a.out);
  pipeline::MetricsWriter metrics(fs::path(a.out) / "metrics.csv");
  const std::size_t todo = s.cfg.steps > s.step ? s.cfg.steps - s.step : 0;
  pipeline::train(s, examples, todo, [&](const pipeline::Metrics& m) {
    metrics.write(m);
    if (m.step % 100 == 0 || m.step == s.cfg.steps) {
      std::fprintf(stderr, "step %zu loss %.5f\n", m.step, m.loss.total);
    }
  });
  const fs::path ckpt = fs::path(a.out) / "checkpoint.mdmt";
  pipeline::save_checkpoint(s, ckpt);
  std::cerr << "step " << s.step << " -> " << ckpt.string() << "\n";
  return 0;
}

int cmd_sample(const Args& a) {
  const auto s = pipeline::load_checkpoint<float>(a.checkpoint);
  const auto model = a.use_ema ? s.ema_model() : s.model;
  pipeline::GenerateOptions go;
  go.class_id = a.class_id;
  go.steps = a.sample_steps;
  go.guidance = a.guidance;
  if (!a.prompt.empty()) {
    if (!s.tokenizer) throw ArgumentError("--prompt needs a checkpoint with a tokenizer");
    for (int id : s.tokenizer->encode(a.prompt)) go.prompt_tokens.push_back(static_cast<std::size_t>(id));
  }
  fs::create_directories(a.out);
  num::Rng root(a.seed.value_or(0));
  for (std::size_t i = 0; i < a.samples; ++i) {
    num::Rng r = root.fork(i);
    const auto g = pipeline::generate(model, go, r);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.%s", i, g.image.dim(2) == 1 ? "pgm" : "ppm");
    write_file(fs::path(a.out) / name, netpbm(g.image));
    if (s.tokenizer) {
      auto ids = pipeline::trim_generated(*s.tokenizer, g.ids);
      for (int& id : ids) {
        if (static_cast<std::size_t>(id) >= s.tokenizer->vocab_size()) id = s.tokenizer->specials().unk;
      }
      std::cout << s.tokenizer->decode(ids) << "\n";
    } else {
      for (std::size_t k = 0; k < g.ids.size(); ++k) std::cout << (k ? " " : "") << g.ids[k];
      std::cout << "\n";
    }
  }
  return 0;
}

int cmd_gradcheck(const Args& a) {
  bool ok = true;
  for (const auto& c : pipeline::run_gradient_suite(a.seed.value_or(0))) {
    const bool pass = c.max_rel_error < kGradTolerance;
    ok &= pass;
    std::printf("%-6s %-12s %.3e %s\n", c.group.c_str(), c.name.c_str(), c.max_rel_error, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : 2;
}

int cmd_bench(const Args& a, const CLI::App& sub) {
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  bench::BenchConfig c;
  if (!a.config.empty()) {
    const auto j = read_json(a.config);
    for (const auto& [k, v] : j.items()) {
      if (k == "lengths") c.lengths = v.get<std::vector<std::size_t>>();
      else if (k == "n") c.width = v.get<std::size_t>();
      else if (k == "m") c.layers = v.get<std::size_t>();
      else if (k == "g") c.groups = v.get<std::size_t>();
      else if (k == "heads") c.heads = v.get<std::size_t>();
      else if (k == "repetitions") c.repetitions = v.get<std::size_t>();
      else if (k == "warmup") c.warmup = v.get<std::size_t>();
      else if (k == "threads") c.threads = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else throw FormatError("bench config: unknown key '" + k + "'");
    }
  }
  if (a.config.empty() || given("--lengths")) c.lengths = a.lengths;
  if (a.config.empty() || given("--n")) c.width = a.n;
  if (a.config.empty() || given("--m")) c.layers = a.m;
  if (a.config.empty() || given("--g")) c.groups = a.g;
  if (a.config.empty() || given("--heads")) c.heads = a.heads;
  if (a.config.empty() || given("--reps")) c.repetitions = a.reps;
  if (a.config.empty() || given("--warmup")) c.warmup = a.warmup;
  if (a.threads) c.threads = *a.threads;
  if (a.seed) c.seed = *a.seed;
  c.validate();
  const auto scan = bench::bench_scan(c);
  const auto attn = bench::bench_attention(c);
  std::ostringstream csv;
  bench::write_csv_header(csv);
  bench::write_csv(csv, scan);
  bench::write_csv(csv, attn);
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    write_file(a.out, csv.str());
  }
  const auto fs_ = bench::fit_loglog(scan), fa = bench::fit_loglog(attn);
  const auto cross = bench::find_crossover(scan, attn);
  std::fprintf(stderr, "scan slope %.3f r2 %.4f | %s slope %.3f r2 %.4f | crossover %s\n", fs_.slope, fs_.r2,
               attn.kernel.c_str(), fa.slope, fa.r2, cross ? std::to_string(*cross).c_str() : "none");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdm: multi-modal diffusion mamba toolkit"};
  app.require_subcommand(1);
  Args a;

  auto* tt = app.add_subcommand("tokenize-train", "fit a unigram tokenizer to a newline-delimited corpus");
  tt->add_option("--input", a.input, "corpus file")->required()->check(CLI::ExistingFile);
  tt->add_option("--vocab", a.vocab, "vocabulary size including specials")->capture_default_str();
  tt->add_option("--max-piece", a.max_piece, "longest piece in code points")->capture_default_str();
  tt->add_option("--seed", a.seed, "accepted for uniformity; training is deterministic");
  tt->add_option("--out", a.out, "model TSV path")->required();

  auto* tk = app.add_subcommand("tokenize", "encode lines to ids (or --decode ids to text)");
  tk->add_option("--model", a.model_path, "model TSV")->required()->check(CLI::ExistingFile);
  tk->add_option("--input", a.input, "input file (default stdin)")->check(CLI::ExistingFile);
  tk->add_option("--text", a.text, "single line to process");
  tk->add_flag("--decode", a.decode, "read space-separated ids, print text");

  auto* md = app.add_subcommand("make-dataset", "write the synthetic shapes dataset");
  md->add_option("--classes", a.classes, "number of classes (1 or 2)")->capture_default_str();
  md->add_option("--count", a.count, "number of items")->capture_default_str();
  md->add_option("--seed", a.seed, "random seed (default 1)");
  md->add_option("--out", a.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint.mdmt and metrics.csv under --out");
  tr->add_option("--data", a.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", a.config, "JSON training config (flags win)")->check(CLI::ExistingFile);
  tr->add_option("--resume", a.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--tokenizer", a.tokenizer, "tokenizer TSV (default: fitted to the captions)")
      ->check(CLI::ExistingFile);
  tr->add_option("--steps", a.steps, "total optimizer steps");
  tr->add_option("--lr", a.lr, "learning rate");
  tr->add_option("--batch", a.batch, "batch size");
  tr->add_option("--threads", a.threads, "worker threads (default MDM_THREADS or all cores)");
  tr->add_option("--seed", a.seed, "random seed");
  tr->add_option("--out", a.out, "output directory")->required();

  auto* sm = app.add_subcommand("sample", "generate images (netpbm files) and captions (stdout)");
  sm->add_option("--checkpoint", a.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  sm->add_option("--class", a.class_id, "class id to condition on");
  sm->add_option("--prompt", a.prompt, "leading caption text kept fixed");
  sm->add_option("--steps", a.sample_steps, "solver steps")->capture_default_str();
  sm->add_option("--guidance", a.guidance, "classifier-free guidance scale")->capture_default_str();
  sm->add_option("--count", a.samples, "number of samples")->capture_default_str();
  sm->add_flag("--ema", a.use_ema, "sample from the EMA weights");
  sm->add_option("--seed", a.seed, "random seed (default 0)");
  sm->add_option("--out", a.out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gc->add_option("--seed", a.seed, "random seed (default 0)");

  auto* bn = app.add_subcommand("bench", "time scan stacks against grouped-query attention");
  bn->add_option("--config", a.config, "JSON bench config (flags win)")->check(CLI::ExistingFile);
  bn->add_option("--lengths", a.lengths, "comma-separated sequence lengths")->delimiter(',')->capture_default_str();
  bn->add_option("--n", a.n, "width and state size")->capture_default_str();
  bn->add_option("--m", a.m, "layers")->capture_default_str();
  bn->add_option("--g", a.g, "query heads per key/value head")->capture_default_str();
  bn->add_option("--heads", a.heads, "attention query heads")->capture_default_str();
  bn->add_option("--reps", a.reps, "timed repetitions (>= 5)")->capture_default_str();
  bn->add_option("--warmup", a.warmup, "warmup runs")->capture_default_str();
  bn->add_option("--threads", a.threads, "attention threads (rows reported as attention_t<k>)");
  bn->add_option("--seed", a.seed, "random seed");
  bn->add_option("--out", a.out, "CSV path (default stdout)");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*tt) return cmd_tokenize_train(a);
    if (*tk) return cmd_tokenize(a);
    if (*md) return cmd_make_dataset(a);
    if (*tr) return cmd_train(a);
    if (*sm) return cmd_sample(a);
    if (*gc) return cmd_gradcheck(a);
    if (*bn) return cmd_bench(a, *bn);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
