// Loads the target fixture, lowers it to int8 and compares it with the float
// model on perplexity, next-token agreement and a short greedy continuation.
//
//   ./build/quickstart [checkpoint] [corpus]

#include <cstdio>
#include <string>

#include "qtk/checkpoint.hpp"
#include "qtk/compress.hpp"
#include "qtk/eval.hpp"
#include "qtk/int_model.hpp"

int main(int argc, char** argv) {
  const std::string ckpt = argc > 1 ? argv[1] : QTK_SOURCE_DIR "/fixtures/target.qtk";
  const std::string text = argc > 2 ? argv[2] : QTK_SOURCE_DIR "/data/corpus.txt";
  try {
    const qtk::Model m = qtk::load_checkpoint(ckpt);
    const auto tokens = qtk::load_corpus(text);
    const std::size_t len = m.config.max_seq_len;

    const auto calib = qtk::calibrate(m, qtk::calibration_slice(tokens, len));
    const auto int8 = qtk::PrecisionAssignment::uniform(m.blocks.size(), 8);
    const qtk::IntModel im = qtk::build_int_model(m, int8, calib);

    const auto val = qtk::validation_slice(tokens, len, 8);
    const double ppl_f = qtk::perplexity(m, val);
    const double ppl_i = qtk::perplexity(im, val);
    std::printf("%s\n", qtk::describe(m).c_str());
    std::printf("perplexity  float %.5f  int8 %.5f\n", ppl_f, ppl_i);
    std::printf("agreement   %.4f\n", qtk::agreement(qtk::float_logits(m), qtk::int_logits(im), val));

    const std::string prompt = "The river ";
    const std::vector<int> ids(prompt.begin(), prompt.end());
    for (const bool integer : {false, true}) {
      const auto out = integer ? qtk::decode_greedy(im, ids, 48) : qtk::decode_greedy(m, ids, 48);
      std::printf("%-5s  %s%s\n", integer ? "int8" : "float", prompt.c_str(),
                  std::string(out.begin(), out.end()).c_str());
    }
  } catch (const qtk::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  }
}
