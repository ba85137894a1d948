fn main() {
    spikeconv::tune_allocator();
    std::process::exit(spikeconv::harness::run_cli(std::env::args_os()));
}
