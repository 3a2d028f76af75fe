fn main() {
    std::process::exit(gaze_diffusion::cli::run(std::env::args_os()));
}
