fn main() {
    println!("conferfp");
}
