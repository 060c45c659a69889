fn main() {
    std::process::exit(modality_lens_cli::dispatch(std::env::args_os()));
}
