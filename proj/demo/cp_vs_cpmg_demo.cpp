// Echo amplitudes of CP and CPMG trains under the same flip-error spread.
#include <cstdio>

#include "spinerr/spinerr.hpp"

int main() {
  using namespace spinerr;
  EnsembleConfig ens;
  ens.n_packets = 50000;
  ens.sigma = deg_to_rad(18.0);
  ens.seed = 3;

  SequenceSpec seq;
  seq.tau = 1.0;
  seq.n_cycles = 16;
  seq.kind = SequenceKind::Cp;
  const auto cp = phased_echoes(run_echo_sequence(seq, ens));
  seq.kind = SequenceKind::Cpmg;
  const auto cpmg = phased_echoes(run_echo_sequence(seq, ens));

  std::printf("%4s %10s %10s %10s\n", "n", "CP", "CP model", "CPMG");
  for (std::size_t n = 1; n <= cp.size(); ++n) {
    std::printf("%4zu %10.4f %10.4f %10.4f\n", n, cp[n - 1].real(), cp_echo_amplitude(n, 0.0, ens.sigma),
                cpmg[n - 1].real());
  }
  return 0;
}
