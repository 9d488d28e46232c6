fn main() {
    std::process::exit(noisy_lstm_cli::run(std::env::args_os()));
}
