#include <CLI11.hpp>

#include "qtk/commands.hpp"

namespace {

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    try {
      out.push_back(std::stoi(text.substr(pos, end - pos)));
    } catch (const std::exception&) {
      qtk::fail(qtk::ErrorKind::invalid_argument, "expected a comma-separated integer list, got '" + text + "'");
    }
    pos = end + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qtk: quantization and compression toolkit for small transformer LMs"};
  app.require_subcommand(1);
  qtk::RunConfig rc;
  std::string precisions, remove;

  auto common = [&](CLI::App* s, bool needs_model = true) {
    if (needs_model) s->add_option("--model", rc.model, "checkpoint path")->required();
    s->add_option("--corpus", rc.corpus, "corpus text file (default: $QTK_CORPUS_DIR/corpus.txt)");
    s->add_option("--out-dir", rc.out_dir, "artifact directory")->capture_default_str();
    s->add_option("--seed", rc.seed, "run seed")->capture_default_str();
    s->add_flag("--quiet", rc.quiet, "suppress progress output");
  };
  auto evaluation = [&](CLI::App* s) {
    s->add_option("--exec", rc.exec, "float (fake-quant) or int")->capture_default_str();
    s->add_option("--calibration", rc.calibration, "calibration JSON for --exec int");
    s->add_option("--clip", rc.clip_percentile, "calibration clip percentile")->capture_default_str();
    s->add_option("--eval-seqs", rc.eval_seqs, "validation sequences")->capture_default_str();
  };

  auto* mk = app.add_subcommand("make-fixture", "train a preset fixture checkpoint");
  common(mk, false);
  mk->add_option("--preset", rc.preset, "target, draft, explore3 or tiny")->capture_default_str();
  mk->add_option("--out", rc.out, "checkpoint to write")->required();
  mk->add_option("--fixture-seed", rc.fixture_seed, "override the preset's init seed");

  auto* cal = app.add_subcommand("calibrate", "record activation ranges");
  common(cal);
  cal->add_option("--clip", rc.clip_percentile, "clip percentile")->capture_default_str();

  auto* scan = app.add_subcommand("scan", "per-block sensitivity scan");
  common(scan);
  evaluation(scan);
  scan->add_option("--precisions", precisions, "bit-widths, e.g. 2,3,4,8,16");

  auto* ex = app.add_subcommand("explore", "Pareto exploration over precision assignments");
  common(ex);
  evaluation(ex);
  ex->add_option("--precisions", precisions, "bit-widths (default 4,8,16)");
  ex->add_option("--blocks", rc.blocks, "all or transformer")->capture_default_str();
  ex->add_option("--strategy", rc.strategy, "auto, exhaustive or greedy")->capture_default_str();
  ex->add_option("--budget", rc.budget, "greedy steps")->capture_default_str();
  ex->add_option("--profile", rc.profile, "sensitivity.json for greedy search");
  ex->add_option("--max-degradation", rc.max_degradation, "allowed relative metric increase")
      ->capture_default_str();

  auto* cp = app.add_subcommand("compress", "apply a structural plan and/or precision assignment");
  common(cp);
  cp->add_option("--plan", rc.plan, "structural plan JSON");
  cp->add_option("--remove-blocks", remove, "transformer block indices, e.g. 1,3");
  cp->add_option("--prune", rc.prune, "block:keep MLP channel counts");
  cp->add_option("--keep-fraction", rc.keep_fraction, "token drop keep fraction");
  cp->add_option("--drop-after", rc.drop_after, "token drop block boundary")->capture_default_str();
  cp->add_option("--assignment", rc.assignment, "e.g. embedding=8,t0=4,...,head=8");
  cp->add_option("--eval-seqs", rc.eval_seqs, "validation sequences")->capture_default_str();
  cp->add_option("--out", rc.out, "compressed checkpoint to write");

  auto* dec = app.add_subcommand("decode", "greedy, speculative or cascaded decoding");
  common(dec);
  dec->add_option("--draft", rc.draft, "draft / small model checkpoint");
  dec->add_option("--mode", rc.mode, "greedy, speculative or cascade")->capture_default_str();
  dec->add_option("--exec", rc.exec, "float or int (greedy mode)")->capture_default_str();
  dec->add_option("--gamma", rc.gamma, "draft length")->capture_default_str();
  dec->add_option("--threshold", rc.threshold, "cascade confidence threshold")->capture_default_str();
  dec->add_option("--self-test", rc.self_test, "max-prob or entropy")->capture_default_str();
  dec->add_option("--steps", rc.steps, "tokens per prompt")->capture_default_str();
  dec->add_option("--prompts", rc.prompts, "number of prompts")->capture_default_str();
  dec->add_option("--prompt-len", rc.prompt_len, "prompt length")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "perplexity and op counts");
  common(ev);
  evaluation(ev);
  ev->add_option("--assignment", rc.assignment, "precision assignment to evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(qtk::ErrorKind::invalid_argument);
  }

  try {
    if (!precisions.empty()) rc.precisions = parse_int_list(precisions);
    for (int b : parse_int_list(remove)) {
      qtk::require(b >= 0, qtk::ErrorKind::invalid_argument, "--remove-blocks indices must be >= 0");
      rc.remove_blocks.push_back(std::size_t(b));
    }
    if (*mk) qtk::cmd_make_fixture(rc);
    else if (*cal) qtk::cmd_calibrate(rc);
    else if (*scan) qtk::cmd_scan(rc);
    else if (*ex) qtk::cmd_explore(rc);
    else if (*cp) qtk::cmd_compress(rc);
    else if (*dec) qtk::cmd_decode(rc);
    else if (*ev) qtk::cmd_eval(rc);
  } catch (const qtk::Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", qtk::to_string(e.kind()), e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
